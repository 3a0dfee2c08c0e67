#pragma once

#include "ragdiff/graph.hpp"
#include "ragdiff/image_ops.hpp"

#include <json.hpp>

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace ragdiff {

/// Everything needed to rebuild a network's parameter layout. Serialized
/// into every checkpoint; loading validates it field by field.
struct ArchDescriptor {
    std::string kind = "base";  // "base" | "super_resolution" | "classifier"
    int image_size = 32;
    int in_channels = 3;
    std::vector<int> widths = {32, 64, 128};
    int text_dim = 64;
    int time_dim = 128;
    int heads = 4;
    int k_max = 4;
    int vocab_size = 0;
    int groups = 8;
    int n_classes = 0;    // classifier head
    int feature_dim = 0;  // classifier penultimate width

    int feature_side() const { return image_size / 8; }
    int bottleneck_dim() const { return widths.back(); }

    bool operator==(const ArchDescriptor&) const = default;

    nlohmann::json to_json() const;
    static ArchDescriptor from_json(const nlohmann::json& j);

    static ArchDescriptor base(int image_size, int vocab_size) {
        ArchDescriptor a;
        a.kind = "base";
        a.image_size = image_size;
        a.in_channels = 3;
        a.vocab_size = vocab_size;
        return a;
    }
    static ArchDescriptor super_resolution(int image_size, int vocab_size) {
        ArchDescriptor a;
        a.kind = "super_resolution";
        a.image_size = image_size;
        a.in_channels = 6;
        a.vocab_size = vocab_size;
        return a;
    }
    /// Tiny double-precision variant used by the finite-difference checks.
    static ArchDescriptor micro(const std::string& kind, int vocab_size) {
        ArchDescriptor a;
        a.kind = kind;
        a.image_size = 16;
        a.in_channels = kind == "super_resolution" ? 6 : 3;
        a.widths = {8, 12, 16};
        a.text_dim = 12;
        a.time_dim = 16;
        a.heads = 2;
        a.groups = 4;
        a.vocab_size = vocab_size;
        return a;
    }
};

inline nlohmann::json ArchDescriptor::to_json() const {
    return nlohmann::json{{"kind", kind},         {"image_size", image_size}, {"in_channels", in_channels},
                          {"widths", widths},     {"text_dim", text_dim},     {"time_dim", time_dim},
                          {"heads", heads},       {"k_max", k_max},           {"vocab_size", vocab_size},
                          {"groups", groups},     {"n_classes", n_classes},   {"feature_dim", feature_dim}};
}

inline ArchDescriptor ArchDescriptor::from_json(const nlohmann::json& j) {
    ArchDescriptor a;
    a.kind = j.at("kind").get<std::string>();
    a.image_size = j.at("image_size").get<int>();
    a.in_channels = j.at("in_channels").get<int>();
    a.widths = j.at("widths").get<std::vector<int>>();
    a.text_dim = j.at("text_dim").get<int>();
    a.time_dim = j.at("time_dim").get<int>();
    a.heads = j.at("heads").get<int>();
    a.k_max = j.at("k_max").get<int>();
    a.vocab_size = j.at("vocab_size").get<int>();
    a.groups = j.at("groups").get<int>();
    a.n_classes = j.value("n_classes", 0);
    a.feature_dim = j.value("feature_dim", 0);
    return a;
}

template <typename T>
class ParamStore {
  public:
    struct Entry {
        std::string name;
        Tensor<T> value;
    };

    int add(const std::string& name, std::vector<int> shape) {
        require(!index_.count(name), kUsageError, "duplicate parameter: " + name);
        index_[name] = (int)entries_.size();
        entries_.push_back({name, Tensor<T>(std::move(shape))});
        return (int)entries_.size() - 1;
    }
    int count() const { return (int)entries_.size(); }
    Entry& entry(int i) { return entries_[(size_t)i]; }
    const Entry& entry(int i) const { return entries_[(size_t)i]; }
    Tensor<T>& value(int i) { return entries_[(size_t)i].value; }
    const Tensor<T>& value(int i) const { return entries_[(size_t)i].value; }
    int find(const std::string& name) const {
        auto it = index_.find(name);
        return it == index_.end() ? -1 : it->second;
    }
    int64_t total_size() const {
        int64_t n = 0;
        for (const auto& e : entries_) n += e.value.numel();
        return n;
    }

  private:
    std::vector<Entry> entries_;
    std::map<std::string, int> index_;
};

template <typename T>
struct NeighborInput {
    Tensor<T> image;         // base-resolution CHW
    std::vector<int> text;   // caption token ids
};

/// The condition bundle fed to the denoiser. Drop flags reroute the
/// corresponding branch through a learned null embedding, so every marginal
/// prediction shares one code path.
template <typename T>
struct Conditioning {
    std::vector<int> text;                    // c_p
    std::vector<NeighborInput<T>> neighbors;  // c_n
    std::optional<Tensor<T>> lowres;          // c_x (super-resolution only)
    bool drop_text = false;
    bool drop_neighbors = false;
};

/// Conditional noise-prediction UNet: a downsampling encoder that doubles as
/// the neighbor encoder (same weights, t = 0), multi-head cross-attention
/// over neighbor feature tokens at the bottleneck, and an upsampling decoder
/// with skip connections. The super-resolution variant concatenates the
/// bilinearly upsampled low-res condition to its input.
template <typename T>
class Denoiser {
  public:
    using Id = typename Graph<T>::Id;

    explicit Denoiser(ArchDescriptor arch) : arch_(std::move(arch)) { build_params(); }

    const ArchDescriptor& arch() const { return arch_; }
    ParamStore<T>& params() { return params_; }
    const ParamStore<T>& params() const { return params_; }

    void init_params(uint64_t seed);

    /// Per-graph build state: one node per touched parameter entry so shared
    /// weights accumulate gradients across every use.
    struct BuildCtx {
        Graph<T>& g;
        const Denoiser* self;
        std::map<int, Id> param_nodes;
        bool with_grad = true;

        Id p(int entry) {
            auto it = param_nodes.find(entry);
            if (it != param_nodes.end()) return it->second;
            Id id = g.external(&self->params_.value(entry), with_grad);
            param_nodes.emplace(entry, id);
            return id;
        }
    };

    struct EncodeOut {
        Id features;            // bottleneck map {d, F, F}
        std::vector<Id> skips;  // per-resolution skip activations
        Id temb_silu;           // {1, time_dim}
    };

    /// Encoder over one image+text at timestep t (t = 0 for neighbors).
    EncodeOut build_encoder(BuildCtx& ctx, Id x, Id text_tokens, int t) const;

    /// Neighbor cross-attention with residual; kv groups in any order.
    Id build_cross_attend(BuildCtx& ctx, Id f, const std::vector<Id>& neighbor_maps) const;

    Id build_decoder(BuildCtx& ctx, Id f, const std::vector<Id>& skips, Id temb_silu) const;

    /// Text token matrix node: embedding rows, or the learned null token when
    /// dropped (the caption contents are then never read).
    Id build_text_tokens(BuildCtx& ctx, const std::vector<int>& text, bool drop) const;

    /// Full noise prediction as a graph; exposes param nodes via ctx.
    Id build_predict_eps(BuildCtx& ctx, Id x_in, const Conditioning<T>& cond, int t,
                         const std::vector<Tensor<T>>* encoded_neighbors = nullptr) const;

    // ---- inference wrappers (no gradients) ----

    Tensor<T> predict_eps(const Tensor<T>& x_t, const Conditioning<T>& cond, int t,
                          const std::vector<Tensor<T>>* encoded_neighbors = nullptr) const;

    /// DStack features of each neighbor at t = 0 (stackable K x {d,F,F}).
    std::vector<Tensor<T>> encode_neighbors(const std::vector<NeighborInput<T>>& neighbors) const;

    /// Encoder output for one image/text (tests and diagnostics).
    Tensor<T> encode(const Tensor<T>& image, const std::vector<int>& text, int t) const;

    /// Inference-time cross-attention over precomputed neighbor maps.
    Tensor<T> cross_attend(const Tensor<T>& features, const std::vector<Tensor<T>>& neighbor_maps) const;

    /// Input node for the target path; validates and concatenates c_x for the
    /// super-resolution stage.
    Tensor<T> make_input(const Tensor<T>& x_t, const Conditioning<T>& cond) const;

    /// Neighbor image prepared for this stage's encoder (resized, and for the
    /// super-resolution stage concatenated with itself as its own low-res).
    Tensor<T> make_neighbor_input(const Tensor<T>& image) const;

  private:
    struct ResBlockP {
        int gn1g, gn1b, w1, b1, tw, tb, gn2g, gn2b, w2, b2;
        int skw = -1, skb = -1;
        int cin, cout;
    };
    struct AttnP {
        int gng, gnb, wq, wk, wv, wo;
    };
    struct HalfBlockP {
        int gng, gnb, w, b, tw, tb;
        int cin, cout;
    };

    ArchDescriptor arch_;
    ParamStore<T> params_;

    // parameter handles
    int stem_w_, stem_b_;
    int down_w_[3], down_b_[3];
    ResBlockP rb1_, rb2_, rbmid_, rbu4_, rbu8_;
    AttnP tattn_lo_, tattn_bot_;  // text attention at the two lowest resolutions
    AttnP xattn_;                 // neighbor cross-attention at the bottleneck
    int xattn_kv_gng_, xattn_kv_gnb_;
    int null_neighbor_;
    int up2_w_, up2_b_, up1_w_, up1_b_, up0_w_, up0_b_;
    HalfBlockP half_mid_, half_hi_;
    int out_gng_, out_gnb_, out_w_, out_b_;
    int time_fc1_w_, time_fc1_b_, time_fc2_w_, time_fc2_b_;
    int text_embed_, text_null_, text_pool_w_, text_pool_b_;

    void build_params();
    ResBlockP add_resblock(const std::string& name, int cin, int cout);
    AttnP add_attn(const std::string& name, int d, int dkv);
    HalfBlockP add_halfblock(const std::string& name, int cin, int cout);

    Id resblock(BuildCtx& ctx, const ResBlockP& p, Id x, Id temb_silu) const;
    Id halfblock(BuildCtx& ctx, const HalfBlockP& p, Id x, Id temb_silu) const;
    Id text_attn(BuildCtx& ctx, const AttnP& p, Id x, Id text_tokens, int side) const;
    Id build_temb(BuildCtx& ctx, int t, Id text_tokens) const;
    Id encode_neighbor_node(BuildCtx& ctx, const NeighborInput<T>& n) const;

    Tensor<T> sinusoidal(int t) const;
};

// ---- implementation ----

template <typename T>
void Denoiser<T>::build_params() {
    require(arch_.image_size % 8 == 0, kUsageError, "image size must be divisible by 8");
    require(arch_.widths.size() == 3, kUsageError, "expected three stage widths");
    require(arch_.vocab_size > 0, kUsageError, "denoiser needs a vocabulary size");
    int w0 = arch_.widths[0], w1 = arch_.widths[1], w2 = arch_.widths[2];
    int td = arch_.time_dim, xd = arch_.text_dim;

    stem_w_ = params_.add("stem.w", {w0, arch_.in_channels * 9});
    stem_b_ = params_.add("stem.b", {w0});
    down_w_[0] = params_.add("down0.w", {w1, w0 * 9});
    down_b_[0] = params_.add("down0.b", {w1});
    rb1_ = add_resblock("rb1", w1, w1);
    down_w_[1] = params_.add("down1.w", {w2, w1 * 9});
    down_b_[1] = params_.add("down1.b", {w2});
    rb2_ = add_resblock("rb2", w2, w2);
    tattn_lo_ = add_attn("tattn_lo", w2, xd);
    down_w_[2] = params_.add("down2.w", {w2, w2 * 9});
    down_b_[2] = params_.add("down2.b", {w2});
    rbmid_ = add_resblock("rbmid", w2, w2);
    tattn_bot_ = add_attn("tattn_bot", w2, xd);

    xattn_ = add_attn("xattn", w2, w2);
    xattn_kv_gng_ = params_.add("xattn.kv_gn.g", {w2});
    xattn_kv_gnb_ = params_.add("xattn.kv_gn.b", {w2});
    null_neighbor_ = params_.add("xattn.null_token", {1, w2});

    rbu4_ = add_resblock("rbu4", w2, w2);
    up2_w_ = params_.add("up2.w", {w2, w2});
    up2_b_ = params_.add("up2.b", {w2});
    rbu8_ = add_resblock("rbu8", 2 * w2, w2);
    up1_w_ = params_.add("up1.w", {w1, w2});
    up1_b_ = params_.add("up1.b", {w1});
    half_mid_ = add_halfblock("half_mid", 2 * w1, w1);
    up0_w_ = params_.add("up0.w", {w0, w1});
    up0_b_ = params_.add("up0.b", {w0});
    half_hi_ = add_halfblock("half_hi", 2 * w0, w0);
    out_gng_ = params_.add("out.gn.g", {w0});
    out_gnb_ = params_.add("out.gn.b", {w0});
    out_w_ = params_.add("out.w", {3, w0 * 9});
    out_b_ = params_.add("out.b", {3});

    time_fc1_w_ = params_.add("time.fc1.w", {td, td});
    time_fc1_b_ = params_.add("time.fc1.b", {td});
    time_fc2_w_ = params_.add("time.fc2.w", {td, td});
    time_fc2_b_ = params_.add("time.fc2.b", {td});
    text_embed_ = params_.add("text.embed", {arch_.vocab_size, xd});
    text_null_ = params_.add("text.null", {1, xd});
    text_pool_w_ = params_.add("text.pool.w", {td, xd});
    text_pool_b_ = params_.add("text.pool.b", {td});
}

template <typename T>
typename Denoiser<T>::ResBlockP Denoiser<T>::add_resblock(const std::string& n, int cin, int cout) {
    ResBlockP p;
    p.cin = cin;
    p.cout = cout;
    p.gn1g = params_.add(n + ".gn1.g", {cin});
    p.gn1b = params_.add(n + ".gn1.b", {cin});
    p.w1 = params_.add(n + ".conv1.w", {cout, cin * 9});
    p.b1 = params_.add(n + ".conv1.b", {cout});
    p.tw = params_.add(n + ".temb.w", {cout, arch_.time_dim});
    p.tb = params_.add(n + ".temb.b", {cout});
    p.gn2g = params_.add(n + ".gn2.g", {cout});
    p.gn2b = params_.add(n + ".gn2.b", {cout});
    p.w2 = params_.add(n + ".conv2.w", {cout, cout * 9});
    p.b2 = params_.add(n + ".conv2.b", {cout});
    if (cin != cout) {
        p.skw = params_.add(n + ".skip.w", {cout, cin});
        p.skb = params_.add(n + ".skip.b", {cout});
    }
    return p;
}

template <typename T>
typename Denoiser<T>::AttnP Denoiser<T>::add_attn(const std::string& n, int d, int dkv) {
    AttnP p;
    p.gng = params_.add(n + ".gn.g", {d});
    p.gnb = params_.add(n + ".gn.b", {d});
    p.wq = params_.add(n + ".wq", {d, d});
    p.wk = params_.add(n + ".wk", {d, dkv});
    p.wv = params_.add(n + ".wv", {d, dkv});
    p.wo = params_.add(n + ".wo", {d, d});
    return p;
}

template <typename T>
typename Denoiser<T>::HalfBlockP Denoiser<T>::add_halfblock(const std::string& n, int cin, int cout) {
    HalfBlockP p;
    p.cin = cin;
    p.cout = cout;
    p.gng = params_.add(n + ".gn.g", {cin});
    p.gnb = params_.add(n + ".gn.b", {cin});
    p.w = params_.add(n + ".conv.w", {cout, cin * 9});
    p.b = params_.add(n + ".conv.b", {cout});
    p.tw = params_.add(n + ".temb.w", {cout, arch_.time_dim});
    p.tb = params_.add(n + ".temb.b", {cout});
    return p;
}

template <typename T>
void Denoiser<T>::init_params(uint64_t seed) {
    for (int i = 0; i < params_.count(); ++i) {
        auto& e = params_.entry(i);
        RandomStream rs = RandomStream::derive(seed, "init/" + e.name);
        const std::string& n = e.name;
        bool is_gn_gamma = n.size() > 5 && n.substr(n.size() - 5) == ".gn.g";
        if (n.find(".gn1.g") != std::string::npos || n.find(".gn2.g") != std::string::npos || is_gn_gamma ||
            n.find("kv_gn.g") != std::string::npos) {
            e.value.fill(T(1));
        } else if (n.back() == 'b' || n.find(".gn") != std::string::npos) {
            e.value.zero();
        } else if (n == "out.w" || n.find(".wo") != std::string::npos) {
            e.value.zero();  // residual branches start as identity
        } else if (n == "text.embed" || n == "text.null" || n == "xattn.null_token") {
            rs.fill_normal(e.value, 0.1);
        } else {
            int fan_in = e.value.rank() == 2 ? e.value.dim(1) : (int)e.value.numel();
            rs.fill_normal(e.value, std::sqrt(2.0 / (double)fan_in));
        }
    }
}

template <typename T>
Tensor<T> Denoiser<T>::sinusoidal(int t) const {
    int d = arch_.time_dim, half = d / 2;
    Tensor<T> out({1, d});
    for (int i = 0; i < half; ++i) {
        double freq = std::exp(-std::log(10000.0) * (double)i / (double)(half - 1));
        out[i] = (T)std::sin((double)t * freq);
        out[half + i] = (T)std::cos((double)t * freq);
    }
    return out;
}

template <typename T>
typename Graph<T>::Id Denoiser<T>::build_temb(BuildCtx& ctx, int t, Id text_tokens) const {
    auto& g = ctx.g;
    Id sin = g.input(sinusoidal(t));
    Id h = g.linear(sin, ctx.p(time_fc1_w_), ctx.p(time_fc1_b_));
    h = g.silu(h);
    h = g.linear(h, ctx.p(time_fc2_w_), ctx.p(time_fc2_b_));
    Id pooled = g.mean_rows(text_tokens);
    Id tpool = g.linear(pooled, ctx.p(text_pool_w_), ctx.p(text_pool_b_));
    return g.silu(g.add(h, tpool));
}

template <typename T>
typename Graph<T>::Id Denoiser<T>::build_text_tokens(BuildCtx& ctx, const std::vector<int>& text,
                                                     bool drop) const {
    if (drop || text.empty()) return ctx.p(text_null_);
    return ctx.g.embedding(ctx.p(text_embed_), text);
}

template <typename T>
typename Graph<T>::Id Denoiser<T>::resblock(BuildCtx& ctx, const ResBlockP& p, Id x, Id temb_silu) const {
    auto& g = ctx.g;
    Id h = g.group_norm(x, ctx.p(p.gn1g), ctx.p(p.gn1b), arch_.groups);
    h = g.silu(h);
    h = g.conv2d(h, ctx.p(p.w1), ctx.p(p.b1), 3, 1);
    Id tb = g.linear(temb_silu, ctx.p(p.tw), ctx.p(p.tb));
    h = g.channel_bias(h, tb);
    h = g.group_norm(h, ctx.p(p.gn2g), ctx.p(p.gn2b), arch_.groups);
    h = g.silu(h);
    h = g.conv2d(h, ctx.p(p.w2), ctx.p(p.b2), 3, 1);
    Id sk = p.skw >= 0 ? g.conv2d(x, ctx.p(p.skw), ctx.p(p.skb), 1, 1) : x;
    return g.add(h, sk);
}

template <typename T>
typename Graph<T>::Id Denoiser<T>::halfblock(BuildCtx& ctx, const HalfBlockP& p, Id x, Id temb_silu) const {
    auto& g = ctx.g;
    Id h = g.group_norm(x, ctx.p(p.gng), ctx.p(p.gnb), arch_.groups);
    h = g.silu(h);
    h = g.conv2d(h, ctx.p(p.w), ctx.p(p.b), 3, 1);
    Id tb = g.linear(temb_silu, ctx.p(p.tw), ctx.p(p.tb));
    return g.channel_bias(h, tb);
}

template <typename T>
typename Graph<T>::Id Denoiser<T>::text_attn(BuildCtx& ctx, const AttnP& p, Id x, Id text_tokens,
                                             int side) const {
    auto& g = ctx.g;
    Id q = g.image_to_tokens(g.group_norm(x, ctx.p(p.gng), ctx.p(p.gnb), arch_.groups));
    Id attn = g.mha(q, {text_tokens}, ctx.p(p.wq), ctx.p(p.wk), ctx.p(p.wv), ctx.p(p.wo), arch_.heads);
    return g.add(x, g.tokens_to_image(attn, side, side));
}

template <typename T>
typename Denoiser<T>::EncodeOut Denoiser<T>::build_encoder(BuildCtx& ctx, Id x, Id text_tokens, int t) const {
    auto& g = ctx.g;
    int s = arch_.image_size;
    EncodeOut out;
    out.temb_silu = build_temb(ctx, t, text_tokens);
    Id h = g.conv2d(x, ctx.p(stem_w_), ctx.p(stem_b_), 3, 1);
    out.skips.push_back(h);  // s, w0
    h = g.conv2d(h, ctx.p(down_w_[0]), ctx.p(down_b_[0]), 3, 2);
    h = resblock(ctx, rb1_, h, out.temb_silu);
    out.skips.push_back(h);  // s/2, w1
    h = g.conv2d(h, ctx.p(down_w_[1]), ctx.p(down_b_[1]), 3, 2);
    h = resblock(ctx, rb2_, h, out.temb_silu);
    h = text_attn(ctx, tattn_lo_, h, text_tokens, s / 4);
    out.skips.push_back(h);  // s/4, w2
    h = g.conv2d(h, ctx.p(down_w_[2]), ctx.p(down_b_[2]), 3, 2);
    h = resblock(ctx, rbmid_, h, out.temb_silu);
    h = text_attn(ctx, tattn_bot_, h, text_tokens, s / 8);
    out.features = h;
    return out;
}

template <typename T>
typename Graph<T>::Id Denoiser<T>::build_cross_attend(BuildCtx& ctx, Id f,
                                                      const std::vector<Id>& neighbor_maps) const {
    auto& g = ctx.g;
    int fs = arch_.feature_side();
    Id q = g.image_to_tokens(g.group_norm(f, ctx.p(xattn_.gng), ctx.p(xattn_.gnb), arch_.groups));
    std::vector<Id> slabs;
    if (neighbor_maps.empty()) {
        slabs.push_back(ctx.p(null_neighbor_));
    } else {
        for (Id nm : neighbor_maps)
            slabs.push_back(
                g.image_to_tokens(g.group_norm(nm, ctx.p(xattn_kv_gng_), ctx.p(xattn_kv_gnb_), arch_.groups)));
    }
    Id attn = g.mha(q, slabs, ctx.p(xattn_.wq), ctx.p(xattn_.wk), ctx.p(xattn_.wv), ctx.p(xattn_.wo),
                    arch_.heads);
    return g.add(f, g.tokens_to_image(attn, fs, fs));
}

template <typename T>
typename Graph<T>::Id Denoiser<T>::build_decoder(BuildCtx& ctx, Id f, const std::vector<Id>& skips,
                                                 Id temb_silu) const {
    auto& g = ctx.g;
    int s = arch_.image_size;
    Id h = resblock(ctx, rbu4_, f, temb_silu);
    h = g.conv2d(g.upsample_nearest2(h), ctx.p(up2_w_), ctx.p(up2_b_), 1, 1);
    h = g.concat_channels(h, skips[2]);
    h = resblock(ctx, rbu8_, h, temb_silu);
    h = g.conv2d(g.upsample_nearest2(h), ctx.p(up1_w_), ctx.p(up1_b_), 1, 1);
    h = g.concat_channels(h, skips[1]);
    h = halfblock(ctx, half_mid_, h, temb_silu);
    h = g.conv2d(g.upsample_nearest2(h), ctx.p(up0_w_), ctx.p(up0_b_), 1, 1);
    h = g.concat_channels(h, skips[0]);
    h = halfblock(ctx, half_hi_, h, temb_silu);
    h = g.group_norm(h, ctx.p(out_gng_), ctx.p(out_gnb_), arch_.groups);
    h = g.silu(h);
    (void)s;
    return g.conv2d(h, ctx.p(out_w_), ctx.p(out_b_), 3, 1);
}

template <typename T>
Tensor<T> Denoiser<T>::make_neighbor_input(const Tensor<T>& image) const {
    Tensor<T> resized = bilinear_resize(image, arch_.image_size);
    if (arch_.kind != "super_resolution") return resized;
    // a neighbor is its own low-res condition at t = 0
    Tensor<T> both({6, arch_.image_size, arch_.image_size});
    std::memcpy(both.ptr(), resized.ptr(), sizeof(T) * (size_t)resized.numel());
    std::memcpy(both.ptr() + resized.numel(), resized.ptr(), sizeof(T) * (size_t)resized.numel());
    return both;
}

template <typename T>
typename Graph<T>::Id Denoiser<T>::encode_neighbor_node(BuildCtx& ctx, const NeighborInput<T>& n) const {
    Id img = ctx.g.input(make_neighbor_input(n.image));
    Id text = build_text_tokens(ctx, n.text, false);
    EncodeOut enc = build_encoder(ctx, img, text, 0);
    return enc.features;
}

template <typename T>
Tensor<T> Denoiser<T>::make_input(const Tensor<T>& x_t, const Conditioning<T>& cond) const {
    int s = arch_.image_size;
    require(x_t.rank() == 3 && x_t.dim(0) == 3 && x_t.dim(1) == s && x_t.dim(2) == s, kUsageError,
            "denoiser input must be 3x" + std::to_string(s) + "x" + std::to_string(s));
    if (arch_.kind != "super_resolution") return x_t;
    require(cond.lowres.has_value(), kUsageError, "super-resolution stage requires a low-res condition");
    Tensor<T> up = bilinear_resize(*cond.lowres, s);
    Tensor<T> both({6, s, s});
    std::memcpy(both.ptr(), x_t.ptr(), sizeof(T) * (size_t)x_t.numel());
    std::memcpy(both.ptr() + x_t.numel(), up.ptr(), sizeof(T) * (size_t)up.numel());
    return both;
}

template <typename T>
typename Graph<T>::Id Denoiser<T>::build_predict_eps(BuildCtx& ctx, Id x_in, const Conditioning<T>& cond,
                                                     int t, const std::vector<Tensor<T>>* encoded) const {
    require((int)cond.neighbors.size() <= arch_.k_max, kUsageError, "more neighbors than k_max");
    auto& g = ctx.g;
    Id text = build_text_tokens(ctx, cond.text, cond.drop_text);
    std::vector<Id> neighbor_maps;
    if (!cond.drop_neighbors) {
        if (encoded) {
            for (const auto& m : *encoded) neighbor_maps.push_back(g.input(m));
        } else {
            for (const auto& n : cond.neighbors) neighbor_maps.push_back(encode_neighbor_node(ctx, n));
        }
    }
    EncodeOut enc = build_encoder(ctx, x_in, text, t);
    Id fused = build_cross_attend(ctx, enc.features, neighbor_maps);
    Id eps = build_decoder(ctx, fused, enc.skips, enc.temb_silu);
    require(all_finite(g.val(eps)), kDataError, "denoiser produced non-finite activations");
    return eps;
}

template <typename T>
Tensor<T> Denoiser<T>::predict_eps(const Tensor<T>& x_t, const Conditioning<T>& cond, int t,
                                   const std::vector<Tensor<T>>* encoded) const {
    Graph<T> g;
    BuildCtx ctx{g, this, {}, /*with_grad=*/false};
    Id x = g.input(make_input(x_t, cond));
    Id eps = build_predict_eps(ctx, x, cond, t, encoded);
    return g.val(eps);
}

template <typename T>
std::vector<Tensor<T>> Denoiser<T>::encode_neighbors(const std::vector<NeighborInput<T>>& neighbors) const {
    require(!neighbors.empty(), kUsageError, "encode_neighbors: need at least one neighbor");
    std::vector<Tensor<T>> out;
    for (const auto& n : neighbors) {
        Graph<T> g;
        BuildCtx ctx{g, this, {}, false};
        Id f = encode_neighbor_node(ctx, n);
        out.push_back(g.val(f));
    }
    return out;
}

template <typename T>
Tensor<T> Denoiser<T>::encode(const Tensor<T>& image, const std::vector<int>& text, int t) const {
    Graph<T> g;
    BuildCtx ctx{g, this, {}, false};
    Id x = g.input(image);
    Id tok = build_text_tokens(ctx, text, false);
    EncodeOut enc = build_encoder(ctx, x, tok, t);
    return g.val(enc.features);
}

template <typename T>
Tensor<T> Denoiser<T>::cross_attend(const Tensor<T>& features, const std::vector<Tensor<T>>& maps) const {
    Graph<T> g;
    BuildCtx ctx{g, this, {}, false};
    Id f = g.input(features);
    std::vector<Id> nm;
    for (const auto& m : maps) nm.push_back(g.input(m));
    Id fused = build_cross_attend(ctx, f, nm);
    return g.val(fused);
}

}  // namespace ragdiff
