#include "ragdiff/eval.hpp"

#include "ragdiff/optimizer.hpp"
#include "ragdiff/parallel.hpp"
#include "ragdiff/png_io.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

namespace fs = std::filesystem;

namespace ragdiff {

// ---- classifier ----

EntityClassifier::EntityClassifier(int image_size, int n_classes) {
    arch_.kind = "classifier";
    arch_.image_size = image_size;
    arch_.in_channels = 3;
    arch_.widths = {16, 32, 64};
    arch_.text_dim = 0;
    arch_.time_dim = 0;
    arch_.heads = 1;
    arch_.k_max = 0;
    arch_.vocab_size = 0;
    arch_.groups = 4;
    arch_.n_classes = n_classes;
    arch_.feature_dim = 64;
    build_params();
}

EntityClassifier::EntityClassifier(const ArchDescriptor& arch) : arch_(arch) {
    require(arch_.kind == "classifier", kVersionError, "not a classifier checkpoint");
    build_params();
}

void EntityClassifier::build_params() {
    require(arch_.n_classes >= 2, kUsageError, "classifier needs at least two classes");
    int prev = arch_.in_channels;
    for (int i = 0; i < 3; ++i) {
        int w = arch_.widths[(size_t)i];
        conv_w_[i] = params_.add("conv" + std::to_string(i) + ".w", {w, prev * 9});
        conv_b_[i] = params_.add("conv" + std::to_string(i) + ".b", {w});
        gn_g_[i] = params_.add("gn" + std::to_string(i) + ".g", {w});
        gn_b_[i] = params_.add("gn" + std::to_string(i) + ".b", {w});
        prev = w;
    }
    fc1_w_ = params_.add("fc1.w", {arch_.feature_dim, prev});
    fc1_b_ = params_.add("fc1.b", {arch_.feature_dim});
    fc2_w_ = params_.add("fc2.w", {arch_.n_classes, arch_.feature_dim});
    fc2_b_ = params_.add("fc2.b", {arch_.n_classes});
}

void EntityClassifier::init_params(uint64_t seed) {
    for (int i = 0; i < params_.count(); ++i) {
        auto& e = params_.entry(i);
        RandomStream rs = RandomStream::derive(seed, "clf_init/" + e.name);
        if (e.name.find(".g") != std::string::npos && e.name.find("gn") == 0)
            e.value.fill(1.0f);
        else if (e.name.back() == 'b')
            e.value.zero();
        else
            rs.fill_normal(e.value, std::sqrt(2.0 / (double)e.value.dim(1)));
    }
}

EntityClassifier::Nodes EntityClassifier::build(Graph<float>& g, typename Denoiser<float>::BuildCtx*,
                                                const Tensor<float>& image, bool with_grad,
                                                std::map<int, Id>* param_nodes) const {
    auto p = [&](int entry) {
        auto it = param_nodes->find(entry);
        if (it != param_nodes->end()) return it->second;
        Id id = g.external(&params_.value(entry), with_grad);
        param_nodes->emplace(entry, id);
        return id;
    };
    Id h = g.input(image);
    for (int i = 0; i < 3; ++i) {
        h = g.conv2d(h, p(conv_w_[i]), p(conv_b_[i]), 3, 2);
        h = g.group_norm(h, p(gn_g_[i]), p(gn_b_[i]), arch_.groups);
        h = g.silu(h);
    }
    h = g.mean_rows(g.image_to_tokens(h));  // global average pool -> {1, C}
    Id feats = g.silu(g.linear(h, p(fc1_w_), p(fc1_b_)));
    Id logit = g.linear(feats, p(fc2_w_), p(fc2_b_));
    return {feats, logit};
}

Tensor<float> EntityClassifier::features(const Tensor<float>& image) const {
    Graph<float> g;
    std::map<int, Id> pn;
    Nodes n = build(g, nullptr, image, false, &pn);
    Tensor<float> out({arch_.feature_dim});
    std::memcpy(out.ptr(), g.val(n.features).ptr(), sizeof(float) * (size_t)arch_.feature_dim);
    return out;
}

Tensor<float> EntityClassifier::logits(const Tensor<float>& image) const {
    Graph<float> g;
    std::map<int, Id> pn;
    Nodes n = build(g, nullptr, image, false, &pn);
    Tensor<float> out({arch_.n_classes});
    std::memcpy(out.ptr(), g.val(n.logits).ptr(), sizeof(float) * (size_t)arch_.n_classes);
    return out;
}

int EntityClassifier::classify(const Tensor<float>& image) const {
    Tensor<float> l = logits(image);
    int best = 0;
    for (int i = 1; i < arch_.n_classes; ++i)
        if (l[i] > l[best]) best = i;
    return best;
}

float EntityClassifier::loss_and_grad(const Tensor<float>& image, int label,
                                      std::vector<float>* grad_out) const {
    Graph<float> g;
    std::map<int, Id> pn;
    Nodes n = build(g, nullptr, image, grad_out != nullptr, &pn);
    Id loss = g.softmax_ce(n.logits, label);
    float value = g.val(loss)[0];
    if (grad_out) {
        g.backward(loss);
        size_t off = 0;
        for (int i = 0; i < params_.count(); ++i) {
            int64_t cnt = params_.value(i).numel();
            auto it = pn.find(i);
            if (it != pn.end() && g.has_grad(it->second)) {
                const Tensor<float>& pg = g.grad(it->second);
                for (int64_t j = 0; j < cnt; ++j) (*grad_out)[off + (size_t)j] += pg[j];
            }
            off += (size_t)cnt;
        }
    }
    return value;
}

void EntityClassifier::save(const std::string& path) const {
    Checkpoint c;
    c.arch = arch_;
    c.step = 0;
    for (int i = 0; i < params_.count(); ++i) {
        const auto& e = params_.entry(i);
        c.params.emplace_back(e.name, e.value);
    }
    save_checkpoint(path, c);
}

EntityClassifier EntityClassifier::load(const std::string& path) {
    Checkpoint c = load_checkpoint(path);
    EntityClassifier clf(c.arch);
    require((int)c.params.size() == clf.params_.count(), kVersionError, "classifier parameter count mismatch");
    for (const auto& [name, value] : c.params) {
        int idx = clf.params_.find(name);
        require(idx >= 0 && clf.params_.value(idx).shape == value.shape, kVersionError,
                "classifier checkpoint mismatch for " + name);
        clf.params_.value(idx) = value;
    }
    return clf;
}

EntityClassifier EntityClassifier::train(const Corpus& corpus, int64_t steps, uint64_t seed, int threads) {
    std::vector<int> labelled;
    for (size_t i = 0; i < corpus.records.size(); ++i)
        if (corpus.records[i].entity_id) labelled.push_back((int)i);
    require(!labelled.empty(), kUsageError, "classifier training needs entity-labelled records");

    EntityClassifier clf(corpus.canvas, (int)corpus.entities.size());
    clf.init_params(seed);
    int64_t psize = clf.params_.total_size();
    AdamOptimizer adam(psize, 1e-3, 1.0);
    std::vector<float*> flat;
    for (int i = 0; i < clf.params_.count(); ++i) {
        Tensor<float>& p = clf.params_.value(i);
        for (int64_t j = 0; j < p.numel(); ++j) flat.push_back(&p[j]);
    }
    if (threads <= 0) threads = default_threads();

    RandomStream sel = RandomStream::derive(seed, "clf/select");
    const int batch = 16;
    std::vector<std::vector<float>> grads((size_t)batch);
    std::vector<int> picks((size_t)batch);
    for (int64_t step = 0; step < steps; ++step) {
        for (int b = 0; b < batch; ++b) picks[(size_t)b] = labelled[(size_t)sel.uniform_int(0, (int64_t)labelled.size() - 1)];
        parallel_for(batch, threads, [&](int b) {
            grads[(size_t)b].assign((size_t)psize, 0.0f);
            const auto& r = corpus.records[(size_t)picks[(size_t)b]];
            int label = corpus.entity_index.at(*r.entity_id);
            clf.loss_and_grad(r.image, label, &grads[(size_t)b]);
        });
        std::vector<float> grad((size_t)psize, 0.0f);
        for (int b = 0; b < batch; ++b)
            for (size_t j = 0; j < grad.size(); ++j) grad[j] += grads[(size_t)b][j] / (float)batch;
        adam.step(grad, [&](size_t i) -> float& { return *flat[i]; });
    }
    return clf;
}

EntityClassifier EntityClassifier::load_or_train(const Corpus& corpus, const std::string& corpus_dir,
                                                 int64_t steps, uint64_t seed) {
    fs::path path = fs::path(corpus_dir) / "classifier.ckpt";
    if (fs::exists(path)) return load(path.string());
    EntityClassifier clf = train(corpus, steps, seed);
    clf.save(path.string());
    return clf;
}

// ---- oracles ----

std::vector<Tensor<float>> render_prototypes(const std::vector<EntitySpec>& entities, int canvas) {
    std::vector<Tensor<float>> out;
    out.reserve(entities.size());
    for (const auto& e : entities) out.push_back(render_prototype(e, canvas));
    return out;
}

int classify_entity(const Tensor<float>& image, const std::vector<Tensor<float>>& prototypes) {
    require(!prototypes.empty(), kUsageError, "classify_entity: no prototypes");
    int best = 0;
    double best_mse = mse(image, prototypes[0]);
    for (size_t i = 1; i < prototypes.size(); ++i) {
        double m = mse(image, prototypes[i]);
        if (m < best_mse) {
            best_mse = m;
            best = (int)i;
        }
    }
    return best;
}

double entity_faithfulness(const std::vector<Tensor<float>>& images, int entity_idx,
                           const std::vector<Tensor<float>>& prototypes) {
    if (images.empty()) return 0.0;
    int hits = 0;
    for (const auto& img : images)
        if (classify_entity(img, prototypes) == entity_idx) ++hits;
    return (double)hits / (double)images.size();
}

namespace {

std::array<double, 3> border_mean(const Tensor<float>& image, int ring = 2) {
    int h = image.dim(1), w = image.dim(2);
    std::array<double, 3> acc{0, 0, 0};
    int count = 0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            if (y >= ring && y < h - ring && x >= ring && x < w - ring) continue;
            for (int c = 0; c < 3; ++c) acc[(size_t)c] += (double)image[((int64_t)c * h + y) * w + x];
            ++count;
        }
    for (auto& v : acc) v /= (double)count;
    return acc;
}

double dist2(const std::array<double, 3>& a, const std::array<float, 3>& b) {
    double s = 0;
    for (int c = 0; c < 3; ++c) {
        double d = a[(size_t)c] - (double)b[(size_t)c];
        s += d * d;
    }
    return s;
}

}  // namespace

int classify_background(const Tensor<float>& image) {
    std::array<double, 3> m = border_mean(image);
    int best = 0;
    double best_d = dist2(m, scene_color_rgb(0));
    for (int i = 1; i < kNumSceneColors; ++i) {
        double d = dist2(m, scene_color_rgb(i));
        if (d < best_d) {
            best_d = d;
            best = i;
        }
    }
    return best;
}

double text_alignment(const std::vector<Tensor<float>>& images, const SceneSpec& scene) {
    if (images.empty()) return 0.0;
    int hits = 0;
    for (const auto& img : images)
        if (classify_background(img) == scene.background) ++hits;
    return (double)hits / (double)images.size();
}

bool background_is_canonical(const Tensor<float>& image) {
    std::array<double, 3> m = border_mean(image);
    double gray = dist2(m, canonical_background_rgb());
    for (int i = 0; i < kNumSceneColors; ++i)
        if (dist2(m, scene_color_rgb(i)) < gray) return false;
    return true;
}

// ---- Frechet ----

double frechet_distance(const std::vector<std::vector<double>>& feats_a,
                        const std::vector<std::vector<double>>& feats_b) {
    require(!feats_a.empty() && !feats_b.empty(), kUsageError, "frechet_distance: empty feature set");
    int d = (int)feats_a[0].size();
    require((int)feats_b[0].size() == d, kUsageError, "frechet_distance: dimension mismatch");

    auto fit = [&](const std::vector<std::vector<double>>& rows, Eigen::VectorXd& mu, Eigen::MatrixXd& cov) {
        int n = (int)rows.size();
        Eigen::MatrixXd m(n, d);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j) m(i, j) = rows[(size_t)i][(size_t)j];
        mu = m.colwise().mean();
        Eigen::MatrixXd centered = m.rowwise() - mu.transpose();
        cov = centered.transpose() * centered / std::max(1.0, (double)(n - 1));
        cov += 1e-6 * Eigen::MatrixXd::Identity(d, d);
    };
    Eigen::VectorXd mu1, mu2;
    Eigen::MatrixXd s1, s2;
    fit(feats_a, mu1, s1);
    fit(feats_b, mu2, s2);

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es1(s1);
    Eigen::VectorXd ev1 = es1.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    Eigen::MatrixXd s1h = es1.eigenvectors() * ev1.asDiagonal() * es1.eigenvectors().transpose();
    Eigen::MatrixXd mid = s1h * s2 * s1h;
    mid = 0.5 * (mid + mid.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> esm(mid);
    double tr_sqrt = esm.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();

    double diff = (mu1 - mu2).squaredNorm();
    return diff + s1.trace() + s2.trace() - 2.0 * tr_sqrt;
}

double fid_proxy(const EntityClassifier& model, const std::vector<Tensor<float>>& gen_images,
                 const std::vector<Tensor<float>>& ref_images) {
    require(gen_images.size() >= 200 && ref_images.size() >= 200, kUsageError,
            "fid_proxy: both sets need at least 200 images");
    auto extract = [&](const std::vector<Tensor<float>>& imgs) {
        std::vector<std::vector<double>> feats(imgs.size());
        parallel_for((int)imgs.size(), default_threads(), [&](int i) {
            Tensor<float> f = model.features(imgs[(size_t)i]);
            feats[(size_t)i].assign(f.ptr(), f.ptr() + f.numel());
        });
        return feats;
    };
    return frechet_distance(extract(gen_images), extract(ref_images));
}

// ---- benchmark ----

BenchSpec make_bench(const Corpus& corpus, bool canonical_scene, int max_entities_per_bucket) {
    BenchSpec bench;
    bench.canonical_scene = canonical_scene;
    int counts[3] = {0, 0, 0};
    for (const auto& e : corpus.entities) {
        int b = (int)e.bucket;
        if (max_entities_per_bucket > 0 && counts[b] >= max_entities_per_bucket) continue;
        ++counts[b];
        bench.entity_ids.push_back(e.entity_id);
    }
    require(counts[0] > 0 && counts[1] > 0 && counts[2] > 0, kUsageError,
            "bench must span all frequency buckets");
    return bench;
}

namespace {

SceneSpec bench_scene(const BenchSpec& bench, const EntitySpec& e, int e_idx, int template_idx, int canvas) {
    SceneSpec sc;
    sc.position = 0;
    sc.scale = canonical_scale(e, canvas);
    sc.background = bench.canonical_scene ? -1 : (e_idx * kNumCaptionTemplates + template_idx) % kNumSceneColors;
    return sc;
}

std::vector<NeighborInput<float>> curated_neighbors(const Corpus& corpus, const std::string& entity_id, int k,
                                                    bool sr_stage) {
    std::vector<int> kb = corpus.kb_indices_for_entity(entity_id);
    std::vector<NeighborInput<float>> out;
    if (kb.empty()) return out;
    for (int i = 0; i < k; ++i) {
        const auto& rec = corpus.records[(size_t)kb[(size_t)(i % (int)kb.size())]];
        NeighborInput<float> n;
        n.image = sr_stage ? box_downsample2(rec.image) : rec.image;
        n.text = rec.caption;
        out.push_back(std::move(n));
    }
    return out;
}

std::vector<NeighborInput<float>> index_neighbors(const Corpus& corpus, const Bm25Index& index,
                                                  const std::vector<std::string>& prompt_tokens, int k,
                                                  bool sr_stage) {
    NeighborSet ns = index.query_top_k(prompt_tokens, k);
    std::vector<NeighborInput<float>> out;
    for (const auto& sn : ns.neighbors) {
        const auto& rec = corpus.record(sn.record_id);
        NeighborInput<float> n;
        n.image = sr_stage ? box_downsample2(rec.image) : rec.image;
        n.text = rec.caption;
        out.push_back(std::move(n));
    }
    return out;
}

}  // namespace

void EvalReport::compute_aggregates() {
    auto fold = [&](auto pred) {
        BucketAgg a;
        for (const auto& r : rows) {
            if (r.skipped || !pred(r)) continue;
            a.faith_mean += r.faith_mean;
            a.faith_best += r.faith_best;
            a.alignment += r.alignment;
            ++a.rows;
        }
        if (a.rows) {
            a.faith_mean /= a.rows;
            a.faith_best /= a.rows;
            a.alignment /= a.rows;
        }
        return a;
    };
    overall = fold([](const BenchRow&) { return true; });
    frequent = fold([](const BenchRow& r) { return r.bucket == Bucket::frequent; });
    infrequent = fold([](const BenchRow& r) { return r.bucket == Bucket::infrequent; });
    unseen = fold([](const BenchRow& r) { return r.bucket == Bucket::unseen; });
    infrequent_and_unseen = fold([](const BenchRow& r) { return r.bucket != Bucket::frequent; });
}

void EvalReport::save(const std::string& dir, const std::string& name) const {
    fs::create_directories(dir);
    std::ofstream rows_out(fs::path(dir) / (name + "_rows.tsv"));
    rows_out << "entity\tbucket\ttemplate\tprompt\tfaith_mean\tfaith_best\talignment\tskipped\n";
    for (const auto& r : rows)
        rows_out << r.entity_id << '\t' << bucket_name(r.bucket) << '\t' << r.template_idx << '\t' << r.prompt
                 << '\t' << r.faith_mean << '\t' << r.faith_best << '\t' << r.alignment << '\t'
                 << (r.skipped ? 1 : 0) << '\n';
    std::ofstream sum(fs::path(dir) / (name + "_summary.txt"));
    auto line = [&](const char* label, const BucketAgg& a) {
        sum << label << "\tfaith_mean=" << a.faith_mean << "\tfaith_best=" << a.faith_best
            << "\talignment=" << a.alignment << "\trows=" << a.rows << '\n';
    };
    line("overall", overall);
    line("frequent", frequent);
    line("infrequent", infrequent);
    line("unseen", unseen);
    line("infrequent+unseen", infrequent_and_unseen);
    if (fid) sum << "fid_proxy\t" << *fid << '\n';
}

EvalReport run_bench(const BenchContext& ctx, const BenchSpec& bench, const std::string& out_dir) {
    require(ctx.corpus && ctx.model && ctx.schedule, kUsageError, "run_bench: incomplete context");
    require(ctx.retrieval == RetrievalMode::curated || ctx.index, kUsageError,
            "run_bench: index retrieval mode needs an index");
    const Corpus& corpus = *ctx.corpus;
    bool sr_stage = ctx.model->arch().kind == "super_resolution";
    int canvas = ctx.model->arch().image_size;
    std::vector<Tensor<float>> prototypes = render_prototypes(corpus.entities, canvas);

    struct Job {
        BenchRow row;
        Conditioning<float> cond;
        int entity_idx = 0;
        std::vector<Tensor<float>> images;
    };
    std::vector<Job> jobs;
    for (size_t ei = 0; ei < bench.entity_ids.size(); ++ei) {
        const EntitySpec& e = corpus.entity(bench.entity_ids[ei]);
        for (int tj = 0; tj < kNumCaptionTemplates; ++tj) {
            Job job;
            job.entity_idx = corpus.entity_index.at(e.entity_id);
            job.row.entity_id = e.entity_id;
            job.row.bucket = e.bucket;
            job.row.template_idx = tj;
            job.row.scene = bench_scene(bench, e, (int)ei, tj, canvas);
            std::vector<std::string> prompt_tokens =
                caption_from_template(tj, e.name_token, job.row.scene.background, job.row.scene.position);
            for (size_t w = 0; w < prompt_tokens.size(); ++w)
                job.row.prompt += (w ? " " : "") + prompt_tokens[w];

            Conditioning<float> cond;
            for (const auto& tok : prompt_tokens) cond.text.push_back(corpus.vocab.require_id(tok));
            cond.neighbors = ctx.retrieval == RetrievalMode::curated
                                 ? curated_neighbors(corpus, e.entity_id, ctx.k, sr_stage)
                                 : index_neighbors(corpus, *ctx.index, prompt_tokens, ctx.k, sr_stage);
            cond.drop_neighbors = ctx.force_drop_neighbors;
            if (cond.neighbors.empty() && !ctx.force_drop_neighbors) {
                job.row.skipped = true;  // no knowledge-base record to retrieve
            }
            job.cond = std::move(cond);
            jobs.push_back(std::move(job));
        }
    }

    // flatten (job, sample) pairs for parallel sampling
    struct Unit {
        int job;
        int sample;
    };
    std::vector<Unit> units;
    for (size_t j = 0; j < jobs.size(); ++j) {
        if (jobs[j].row.skipped) continue;
        jobs[j].images.resize((size_t)bench.samples_per_prompt);
        for (int s = 0; s < bench.samples_per_prompt; ++s) units.push_back({(int)j, s});
    }
    int threads = ctx.threads > 0 ? ctx.threads : default_threads();
    parallel_for((int)units.size(), threads, [&](int u) {
        const Unit& unit = units[(size_t)u];
        Job& job = jobs[(size_t)unit.job];
        GuidanceConfig g = ctx.gcfg;
        g.seed = splitmix64(ctx.seed ^ splitmix64((uint64_t)unit.job * 131071ull + (uint64_t)unit.sample));
        auto [img, trace] = sample(*ctx.model, job.cond, *ctx.schedule, g);
        job.images[(size_t)unit.sample] = std::move(img);
    });

    EvalReport report;
    for (auto& job : jobs) {
        if (!job.row.skipped) {
            int hits = 0;
            for (const auto& img : job.images)
                if (classify_entity(img, prototypes) == job.entity_idx) ++hits;
            job.row.faith_mean = (double)hits / (double)job.images.size();
            job.row.faith_best = hits > 0 ? 1.0 : 0.0;
            if (bench.canonical_scene) {
                int ok = 0;
                for (const auto& img : job.images)
                    if (background_is_canonical(img)) ++ok;
                job.row.alignment = (double)ok / (double)job.images.size();
            } else {
                job.row.alignment = text_alignment(job.images, job.row.scene);
            }
        }
        report.rows.push_back(job.row);
    }
    report.compute_aggregates();

    if (!out_dir.empty()) {
        report.save(out_dir, "bench");
        std::vector<Tensor<float>> sheet;
        for (const auto& job : jobs)
            if (!job.images.empty()) sheet.push_back(job.images[0]);
        if (!sheet.empty())
            write_png((fs::path(out_dir) / "bench_samples.png").string(),
                      tile_grid(sheet, kNumCaptionTemplates));
    }
    return report;
}

AblationTable ablate_k(const BenchContext& ctx, const BenchSpec& bench, const std::vector<int>& k_values) {
    AblationTable table;
    table.axis = "k";
    for (int k : k_values) {
        BenchContext c = ctx;
        c.k = k;
        table.entries.emplace_back((double)k, run_bench(c, bench));
    }
    return table;
}

AblationTable ablate_eta(const BenchContext& ctx, const BenchSpec& bench, const std::vector<double>& etas) {
    AblationTable table;
    table.axis = "eta";
    for (double eta : etas) {
        BenchContext c = ctx;
        c.gcfg.mode = GuidanceMode::interleaved;
        c.gcfg.eta = eta;
        table.entries.emplace_back(eta, run_bench(c, bench));
    }
    return table;
}

void AblationTable::save(const std::string& path) const {
    std::ofstream out(path);
    require((bool)out, kDataError, "cannot write ablation table: " + path);
    out << axis << "\tfaith_mean\tfaith_best\talignment\tinfreq_unseen_faith\n";
    for (const auto& [x, report] : entries)
        out << x << '\t' << report.overall.faith_mean << '\t' << report.overall.faith_best << '\t'
            << report.overall.alignment << '\t' << report.infrequent_and_unseen.faith_mean << '\n';
}

// ---- directional statistics ----

namespace {
std::vector<double> average_ranks(const std::vector<double>& v) {
    int n = (int)v.size();
    std::vector<int> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](int a, int b) { return v[(size_t)a] < v[(size_t)b]; });
    std::vector<double> ranks(v.size());
    int i = 0;
    while (i < n) {
        int j = i;
        while (j + 1 < n && v[(size_t)idx[(size_t)j + 1]] == v[(size_t)idx[(size_t)i]]) ++j;
        double r = 0.5 * (i + j) + 1.0;
        for (int k = i; k <= j; ++k) ranks[(size_t)idx[(size_t)k]] = r;
        i = j + 1;
    }
    return ranks;
}
}  // namespace

double spearman_against_monotone(const std::vector<double>& values, bool increasing) {
    int n = (int)values.size();
    if (n < 2) return 1.0;
    bool constant = true;
    for (int i = 1; i < n; ++i)
        if (values[(size_t)i] != values[0]) constant = false;
    if (constant) return 1.0;  // no evidence against monotonicity
    std::vector<double> r = average_ranks(values);
    double mean_r = 0, mean_i = (n + 1) / 2.0;
    for (double x : r) mean_r += x;
    mean_r /= n;
    double num = 0, da = 0, db = 0;
    for (int i = 0; i < n; ++i) {
        double ideal = increasing ? (i + 1) : (n - i);
        num += (r[(size_t)i] - mean_r) * (ideal - mean_i);
        da += (r[(size_t)i] - mean_r) * (r[(size_t)i] - mean_r);
        db += (ideal - mean_i) * (ideal - mean_i);
    }
    return num / std::sqrt(da * db);
}

bool directional_pass(const std::vector<double>& values, bool increasing, int max_inversions,
                      double max_inversion_magnitude, double min_spearman) {
    int inversions = 0;
    for (size_t i = 1; i < values.size(); ++i) {
        double step = increasing ? values[i] - values[i - 1] : values[i - 1] - values[i];
        if (step < 0) {
            ++inversions;
            if (-step > max_inversion_magnitude) return false;
        }
    }
    if (inversions > max_inversions) return false;
    return spearman_against_monotone(values, increasing) >= min_spearman;
}

}  // namespace ragdiff
