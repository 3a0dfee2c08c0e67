#include "ragdiff/trainer.hpp"

#include "ragdiff/optimizer.hpp"
#include "ragdiff/parallel.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;

namespace ragdiff {

void TrainConfig::validate() const {
    require(steps >= 1, kUsageError, "train: steps must be >= 1");
    require(batch_size >= 1, kUsageError, "train: batch_size must be >= 1");
    require(drop_text_prob >= 0 && drop_text_prob <= 1, kUsageError, "train: drop_text_prob must be in [0,1]");
    require(drop_neighbors_prob >= 0 && drop_neighbors_prob <= 1, kUsageError,
            "train: drop_neighbors_prob must be in [0,1]");
    require(k_neighbors >= 0, kUsageError, "train: k_neighbors must be >= 0");
    require(learning_rate > 0, kUsageError, "train: learning_rate must be positive");
}

std::pair<bool, bool> sample_drop_flags(RandomStream& text_rs, RandomStream& neighbor_rs, double p_text,
                                        double p_neighbors) {
    return {text_rs.bernoulli(p_text), neighbor_rs.bernoulli(p_neighbors)};
}

Denoiser<float> make_stage_model(const Corpus& corpus, Stage stage, uint64_t seed) {
    ArchDescriptor arch = stage == Stage::base
                              ? ArchDescriptor::base(corpus.canvas, corpus.vocab.size())
                              : ArchDescriptor::super_resolution(corpus.canvas, corpus.vocab.size());
    Denoiser<float> model(arch);
    model.init_params(seed);
    return model;
}

Conditioning<float> make_conditioning(const Corpus& corpus, const KnnTriple& triple, int k, Stage stage) {
    Conditioning<float> cond;
    const auto& target = corpus.records[(size_t)triple.target];
    cond.text = target.caption;
    int take = std::min<int>(k, (int)triple.neighbors.size());
    for (int i = 0; i < take; ++i) {
        const auto& nrec = corpus.records[(size_t)triple.neighbors[(size_t)i]];
        NeighborInput<float> n;
        // knowledge-base images live at base resolution
        n.image = stage == Stage::super_resolution ? box_downsample2(nrec.image) : nrec.image;
        n.text = nrec.caption;
        cond.neighbors.push_back(std::move(n));
    }
    if (stage == Stage::super_resolution) cond.lowres = box_downsample2(target.image);
    return cond;
}

Tensor<float> training_target(const Corpus& corpus, const KnnTriple& triple) {
    return corpus.records[(size_t)triple.target].image;
}

float example_loss_and_grad(const Denoiser<float>& model, const Tensor<float>& x0,
                            const Conditioning<float>& cond, int t, const Tensor<float>& eps,
                            const NoiseSchedule& schedule, std::vector<float>* grad_out) {
    NoisedSample<float> ns = forward_noise(x0, t, eps, schedule);
    double ab = schedule.alpha_bar_at(t);
    float c1 = (float)(1.0 / std::sqrt(ab));
    float c2 = (float)(-std::sqrt(1.0 - ab) / std::sqrt(ab));

    Graph<float> g;
    typename Denoiser<float>::BuildCtx ctx{g, &model, {}, grad_out != nullptr};
    auto x_in = g.input(model.make_input(ns.x_t, cond));
    auto eps_pred = model.build_predict_eps(ctx, x_in, cond, t);
    auto xt_node = g.input(ns.x_t);
    auto x0_hat = g.lincomb(xt_node, eps_pred, c1, c2);
    auto loss = g.mse_loss(x0_hat, x0);
    float value = g.val(loss)[0];
    if (grad_out) {
        g.backward(loss);
        size_t off = 0;
        for (int i = 0; i < model.params().count(); ++i) {
            int64_t n = model.params().value(i).numel();
            auto it = ctx.param_nodes.find(i);
            if (it != ctx.param_nodes.end() && g.has_grad(it->second)) {
                const Tensor<float>& pg = g.grad(it->second);
                for (int64_t j = 0; j < n; ++j) (*grad_out)[off + (size_t)j] += pg[j];
            }
            off += (size_t)n;
        }
    }
    return value;
}

namespace {

// stable flat view over all parameter elements, entry order
std::vector<float*> flat_param_view(ParamStore<float>& params) {
    std::vector<float*> flat;
    flat.reserve((size_t)params.total_size());
    for (int i = 0; i < params.count(); ++i) {
        Tensor<float>& p = params.value(i);
        for (int64_t j = 0; j < p.numel(); ++j) flat.push_back(&p[j]);
    }
    return flat;
}

}  // namespace

TrainResult train(Denoiser<float>& model, const Corpus& corpus, const std::vector<KnnTriple>& triples,
                  const TrainConfig& cfg, Stage stage, const NoiseSchedule& schedule,
                  const std::string& out_dir) {
    cfg.validate();
    require(!triples.empty(), kUsageError, "train: empty dataset");
    if (stage == Stage::super_resolution)
        require(corpus.canvas % 2 == 0 && model.arch().kind == "super_resolution", kUsageError,
                "train: super-resolution stage needs an even canvas and an SR model");

    int threads = cfg.threads > 0 ? cfg.threads : default_threads();
    int64_t psize = model.params().total_size();

    RandomStream sel = RandomStream::derive(cfg.seed, "train/select");
    RandomStream tdraw = RandomStream::derive(cfg.seed, "train/t");
    RandomStream noise = RandomStream::derive(cfg.seed, "train/eps");
    RandomStream drop_text_rs = RandomStream::derive(cfg.seed, "train/drop_text");
    RandomStream drop_nb_rs = RandomStream::derive(cfg.seed, "train/drop_neighbors");

    AdamOptimizer adam(psize, cfg.learning_rate, cfg.clip_norm);
    std::vector<float*> flat = flat_param_view(model.params());

    std::ofstream log_file;
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        log_file.open(fs::path(out_dir) / "loss_log.txt");
    }

    TrainResult result;
    std::string last_ckpt;
    auto save_at = [&](int64_t step) {
        if (out_dir.empty()) return std::string();
        char buf[64];
        std::snprintf(buf, sizeof(buf), "ckpt_%08lld.ckpt", (long long)step);
        std::string path = (fs::path(out_dir) / buf).string();
        save_checkpoint(path, make_checkpoint(model, schedule, step));
        return path;
    };

    struct Slot {
        Tensor<float> x0;
        Conditioning<float> cond;
        int t = 1;
        Tensor<float> eps;
        std::vector<float> grad;
        float loss = 0;
    };
    std::vector<Slot> slots((size_t)cfg.batch_size);
    int side = corpus.canvas;

    for (int64_t step = 1; step <= cfg.steps; ++step) {
        // all randomness is drawn here, single-threaded, in slot order
        for (auto& slot : slots) {
            const KnnTriple& triple = triples[(size_t)sel.uniform_int(0, (int64_t)triples.size() - 1)];
            slot.x0 = training_target(corpus, triple);
            slot.cond = make_conditioning(corpus, triple, cfg.k_neighbors, stage);
            auto [dt, dn] = sample_drop_flags(drop_text_rs, drop_nb_rs, cfg.drop_text_prob,
                                              cfg.drop_neighbors_prob);
            slot.cond.drop_text = dt;
            slot.cond.drop_neighbors = dn;
            slot.t = (int)tdraw.uniform_int(1, schedule.T);
            slot.eps = Tensor<float>({3, side, side});
            noise.fill_normal(slot.eps);
            slot.grad.assign((size_t)psize, 0.0f);
        }
        parallel_for((int)slots.size(), threads, [&](int i) {
            Slot& s = slots[(size_t)i];
            s.loss = example_loss_and_grad(model, s.x0, s.cond, s.t, s.eps, schedule, &s.grad);
        });

        double loss_mean = 0;
        std::vector<float> grad((size_t)psize, 0.0f);
        for (const auto& s : slots) {  // fixed reduction order
            loss_mean += (double)s.loss;
            for (size_t j = 0; j < grad.size(); ++j) grad[j] += s.grad[j] / (float)slots.size();
        }
        loss_mean /= (double)slots.size();

        result.loss_log.push_back(loss_mean);
        if (log_file) log_file << step << '\t' << loss_mean << '\n';

        if (!std::isfinite(loss_mean)) {
            result.aborted_non_finite = true;
            result.steps = step;
            result.final_checkpoint = last_ckpt;
            if (log_file) log_file.flush();
            raise_data("train: non-finite loss at step " + std::to_string(step) +
                       (last_ckpt.empty() ? "" : ", last good checkpoint " + last_ckpt));
        }

        adam.step(grad, [&](size_t i) -> float& { return *flat[i]; });

        if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) last_ckpt = save_at(step);
    }

    result.steps = cfg.steps;
    if (!out_dir.empty()) {
        std::string path = (fs::path(out_dir) / "ckpt_final.ckpt").string();
        save_checkpoint(path, make_checkpoint(model, schedule, cfg.steps));
        result.final_checkpoint = path;
    }
    return result;
}

}  // namespace ragdiff
