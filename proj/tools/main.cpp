#include "ragdiff/checkpoint.hpp"
#include "ragdiff/config.hpp"
#include "ragdiff/corpus.hpp"
#include "ragdiff/error.hpp"
#include "ragdiff/eval.hpp"
#include "ragdiff/guidance.hpp"
#include "ragdiff/parallel.hpp"
#include "ragdiff/png_io.hpp"
#include "ragdiff/retrieval.hpp"
#include "ragdiff/trainer.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

namespace fs = std::filesystem;
using namespace ragdiff;

namespace {

void echo_config(const std::string& out_dir, const std::map<std::string, std::string>& kv) {
    if (out_dir.empty()) return;
    fs::create_directories(out_dir);
    Config cfg;
    for (const auto& [k, v] : kv) cfg.set(k, v);
    cfg.echo((fs::path(out_dir) / "effective_config.txt").string());
}

struct GuidanceFlags {
    std::string mode = "interleaved";
    double w = 30.0, wp = 30.0, wn = 30.0, eta = 0.5, lambda = 0.5;
    int steps = 256;

    void attach(CLI::App* cmd) {
        cmd->add_option("--mode", mode, "guidance mode: standard|joint|weighted|interleaved")
            ->default_val(mode);
        cmd->add_option("--w", w, "standard guidance weight")->default_val(w);
        cmd->add_option("--wp", wp, "text guidance weight")->default_val(wp);
        cmd->add_option("--wn", wn, "neighbor guidance weight")->default_val(wn);
        cmd->add_option("--eta", eta, "interleave ratio (text branch probability)")->default_val(eta);
        cmd->add_option("--lambda", lambda, "weighted-mode mixing factor")->default_val(lambda);
        cmd->add_option("--steps", steps, "diffusion steps at sampling time")->default_val(steps);
    }
    GuidanceConfig to_config(uint64_t seed) const {
        GuidanceConfig g;
        g.mode = guidance_mode_from(mode);
        g.w = w;
        g.w_p = wp;
        g.w_n = wn;
        g.eta = eta;
        g.lambda_mix = lambda;
        g.steps = steps;
        g.seed = seed;
        return g;
    }
    std::map<std::string, std::string> items() const {
        return {{"mode", mode},
                {"w", std::to_string(w)},
                {"wp", std::to_string(wp)},
                {"wn", std::to_string(wn)},
                {"eta", std::to_string(eta)},
                {"lambda", std::to_string(lambda)},
                {"sample_steps", std::to_string(steps)}};
    }
};

std::pair<Denoiser<float>, NoiseSchedule> load_model(const std::string& path) {
    Checkpoint ckpt = load_checkpoint(path);
    require(ckpt.arch.kind == "base" || ckpt.arch.kind == "super_resolution", kVersionError,
            "checkpoint is not a denoiser: " + path);
    Denoiser<float> model(ckpt.arch);
    restore_params(model, ckpt);
    return {std::move(model), ckpt.schedule};
}

int cmd_build_corpus(const std::string& out, int entities, int canvas, int frequent, int infrequent,
                     int unseen, uint64_t seed) {
    BucketCounts counts{frequent, infrequent, unseen};
    Corpus corpus = generate_synthetic_corpus(entities, counts, canvas, seed);
    save_corpus(corpus, out);
    echo_config(out, {{"command", "build-corpus"},
                      {"entities", std::to_string(entities)},
                      {"canvas", std::to_string(canvas)},
                      {"frequent", std::to_string(frequent)},
                      {"infrequent", std::to_string(infrequent)},
                      {"unseen", std::to_string(unseen)},
                      {"seed", std::to_string(seed)}});
    std::cout << "corpus: " << corpus.records.size() << " records, " << corpus.entities.size()
              << " entities, vocab " << corpus.vocab.size() << " -> " << out << "\n";
    return 0;
}

int cmd_ingest(const std::string& manifest, const std::string& out) {
    IngestStats stats;
    Corpus corpus = ingest_corpus(manifest, &stats);
    save_corpus(corpus, out);
    echo_config(out, {{"command", "ingest"}, {"manifest", manifest}});
    std::cout << "ingested " << stats.kept << " records (dropped " << stats.dropped_length
              << " over-length, " << stats.dropped_date_or_id << " date/id, skipped "
              << stats.skipped_unreadable + stats.skipped_other << ") -> " << out << "\n";
    return 0;
}

int cmd_build_index(const std::string& corpus_dir, const std::string& out, double k1, double b) {
    Corpus corpus = load_corpus(corpus_dir);
    Bm25Index index = Bm25Index::build(corpus, {k1, b}, corpus_dir);
    index.save(out);
    std::cout << "index: " << index.num_docs() << " docs, avg caption length " << index.avg_doc_length()
              << " -> " << out << "\n";
    return 0;
}

int cmd_make_knn(const std::string& corpus_dir, const std::string& index_path, const std::string& out,
                 int k) {
    Corpus corpus = load_corpus(corpus_dir);
    Bm25Index index = Bm25Index::load(index_path);
    std::vector<KnnTriple> triples = build_knn_dataset(corpus, index, k);
    save_knn_dataset(triples, corpus, out);
    int short_count = 0;
    for (const auto& t : triples) short_count += t.short_of_k ? 1 : 0;
    std::cout << "knn: " << triples.size() << " triples (" << short_count << " short of k) -> " << out
              << "\n";
    return 0;
}

int cmd_train(CLI::App* cmd, const std::string& corpus_dir, const std::string& knn_path,
              const std::string& out, const std::string& stage_name, const TrainConfig& flags,
              const std::string& config_path) {
    TrainConfig effective = flags;
    if (!config_path.empty()) {
        Config file = Config::from_file(config_path);
        file.validate_keys({"steps", "batch_size", "learning_rate", "drop_text_prob", "drop_neighbors_prob",
                            "k_neighbors", "seed", "checkpoint_every", "clip_norm", "threads"});
        // file values apply wherever the flag was not given explicitly
        auto given = [&](const char* name) { return cmd->count(name) > 0; };
        if (!given("--steps")) effective.steps = file.get_int("steps", effective.steps);
        if (!given("--batch")) effective.batch_size = (int)file.get_int("batch_size", effective.batch_size);
        if (!given("--lr")) effective.learning_rate = file.get_real("learning_rate", effective.learning_rate);
        if (!given("--drop-text"))
            effective.drop_text_prob = file.get_real("drop_text_prob", effective.drop_text_prob);
        if (!given("--drop-neighbors"))
            effective.drop_neighbors_prob = file.get_real("drop_neighbors_prob", effective.drop_neighbors_prob);
        if (!given("--k")) effective.k_neighbors = (int)file.get_int("k_neighbors", effective.k_neighbors);
        effective.seed = (uint64_t)file.get_int("seed", (int64_t)effective.seed);
        if (!given("--checkpoint-every"))
            effective.checkpoint_every = file.get_int("checkpoint_every", effective.checkpoint_every);
        effective.clip_norm = file.get_real("clip_norm", effective.clip_norm);
        if (!given("--threads")) effective.threads = (int)file.get_int("threads", effective.threads);
    }
    Stage stage = stage_name == "sr" || stage_name == "super_resolution" ? Stage::super_resolution
                                                                         : Stage::base;
    Corpus corpus = load_corpus(corpus_dir);
    std::vector<KnnTriple> triples = load_knn_dataset(corpus, knn_path);
    NoiseSchedule schedule = make_schedule(1000, ScheduleKind::linear, 1e-4, 0.02);
    Denoiser<float> model = make_stage_model(corpus, stage, effective.seed);
    echo_config(out, {{"command", "train"},
                      {"stage", stage_name},
                      {"steps", std::to_string(effective.steps)},
                      {"batch_size", std::to_string(effective.batch_size)},
                      {"learning_rate", std::to_string(effective.learning_rate)},
                      {"drop_text_prob", std::to_string(effective.drop_text_prob)},
                      {"drop_neighbors_prob", std::to_string(effective.drop_neighbors_prob)},
                      {"k_neighbors", std::to_string(effective.k_neighbors)},
                      {"seed", std::to_string(effective.seed)}});
    TrainResult res = train(model, corpus, triples, effective, stage, schedule, out);
    std::cout << "trained " << res.steps << " steps, final loss " << res.loss_log.back() << ", checkpoint "
              << res.final_checkpoint << "\n";
    return 0;
}

int cmd_sample(const std::string& ckpt_path, const std::string& corpus_dir, const std::string& prompt,
               const std::string& out, const std::string& index_path, const std::string& entity,
               bool no_retrieval, int k, int count, uint64_t seed, const GuidanceFlags& gf,
               const std::string& sr_ckpt) {
    auto [model, schedule] = load_model(ckpt_path);
    Corpus corpus = load_corpus(corpus_dir);
    std::vector<std::string> tokens = tokenize(prompt);
    Conditioning<float> cond;
    for (const auto& t : tokens) cond.text.push_back(corpus.vocab.require_id(t));

    bool sr_stage = model.arch().kind == "super_resolution";
    if (no_retrieval) {
        cond.drop_neighbors = true;
    } else if (!entity.empty()) {
        std::vector<int> kb = corpus.kb_indices_for_entity(entity);
        require(!kb.empty(), kDataError, "entity has no knowledge-base record: " + entity);
        for (int i = 0; i < k; ++i) {
            const auto& rec = corpus.records[(size_t)kb[(size_t)(i % (int)kb.size())]];
            cond.neighbors.push_back(
                {sr_stage ? box_downsample2(rec.image) : rec.image, rec.caption});
        }
    } else {
        require(!index_path.empty(), kUsageError, "sample: need --index, --entity or --no-retrieval");
        Bm25Index index = Bm25Index::load(index_path);
        NeighborSet ns = index.query_top_k(tokens, k);
        require(!ns.neighbors.empty(), kDataError, "sample: retrieval returned no neighbors");
        for (const auto& sn : ns.neighbors) {
            const auto& rec = corpus.record(sn.record_id);
            cond.neighbors.push_back({sr_stage ? box_downsample2(rec.image) : rec.image, rec.caption});
        }
    }

    fs::create_directories(out);
    std::optional<Denoiser<float>> sr_model;
    NoiseSchedule sr_schedule;
    if (!sr_ckpt.empty()) {
        auto loaded = load_model(sr_ckpt);
        require(loaded.first.arch().kind == "super_resolution", kVersionError,
                "--sr-checkpoint must be a super-resolution checkpoint");
        sr_model.emplace(std::move(loaded.first));
        sr_schedule = loaded.second;
    }

    for (int i = 0; i < count; ++i) {
        GuidanceConfig g = gf.to_config(splitmix64(seed + (uint64_t)i));
        Tensor<float> img;
        if (sr_model) {
            GuidanceConfig gsr = g;
            gsr.mode = GuidanceMode::standard;
            gsr.w = 5.0;
            gsr.steps = std::min(128, sr_schedule.T);
            img = sample_cascade(model, *sr_model, cond, schedule, sr_schedule, g, gsr);
        } else {
            auto [sampled, trace] = sample(model, cond, schedule, g);
            trace.save((fs::path(out) / ("trace_" + std::to_string(i) + ".txt")).string());
            img = std::move(sampled);
        }
        write_png((fs::path(out) / ("sample_" + std::to_string(i) + ".png")).string(), img);
    }
    auto items = gf.items();
    items["command"] = "sample";
    items["prompt"] = prompt;
    items["seed"] = std::to_string(seed);
    echo_config(out, items);
    std::cout << "wrote " << count << " samples to " << out << "\n";
    return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& corpus_dir, const std::string& out,
             const std::string& index_path, const std::string& retrieval, const std::string& bench_kind,
             int samples, int max_per_bucket, int k, bool drop_neighbors, bool with_fid, uint64_t seed,
             const GuidanceFlags& gf) {
    auto [model, schedule] = load_model(ckpt_path);
    Corpus corpus = load_corpus(corpus_dir);
    std::optional<Bm25Index> index;
    if (!index_path.empty()) index = Bm25Index::load(index_path);

    BenchContext ctx;
    ctx.corpus = &corpus;
    ctx.index = index ? &*index : nullptr;
    ctx.model = &model;
    ctx.schedule = &schedule;
    ctx.gcfg = gf.to_config(seed);
    ctx.retrieval = retrieval == "index" ? RetrievalMode::index : RetrievalMode::curated;
    ctx.k = k;
    ctx.force_drop_neighbors = drop_neighbors;
    ctx.seed = seed;

    BenchSpec bench = make_bench(corpus, bench_kind == "canonical", max_per_bucket);
    bench.samples_per_prompt = samples;
    EvalReport report = run_bench(ctx, bench, out);
    if (with_fid) {
        EntityClassifier clf = EntityClassifier::load_or_train(corpus, corpus_dir);
        std::vector<Tensor<float>> ref;
        for (const auto& r : corpus.records) ref.push_back(r.image);
        std::vector<Tensor<float>> gen;
        RandomStream rs = RandomStream::derive(seed, "eval/fid");
        GuidanceConfig g = ctx.gcfg;
        g.steps = std::min(64, schedule.T);
        std::vector<int> train_idx = corpus.training_indices();
        int need = std::max<size_t>(200, corpus.records.size() / 4);
        std::vector<Conditioning<float>> conds;
        for (int i = 0; i < need; ++i) {
            const auto& rec = corpus.records[(size_t)train_idx[(size_t)rs.uniform_int(
                0, (int64_t)train_idx.size() - 1)]];
            Conditioning<float> c;
            c.text = rec.caption;
            if (rec.entity_id) {
                for (int kb : corpus.kb_indices_for_entity(*rec.entity_id)) {
                    c.neighbors.push_back({corpus.records[(size_t)kb].image,
                                           corpus.records[(size_t)kb].caption});
                    if ((int)c.neighbors.size() >= k) break;
                }
            }
            if (c.neighbors.empty()) c.drop_neighbors = true;
            conds.push_back(std::move(c));
        }
        gen.resize((size_t)need);
        parallel_for(need, default_threads(), [&](int i) {
            GuidanceConfig gi = g;
            gi.seed = splitmix64(seed ^ (uint64_t)(i + 1));
            gen[(size_t)i] = sample(model, conds[(size_t)i], schedule, gi).first;
        });
        report.fid = fid_proxy(clf, gen, ref);
        report.save(out, "bench");
    }
    auto items = gf.items();
    items["command"] = "eval";
    items["retrieval"] = retrieval;
    items["bench"] = bench_kind;
    items["seed"] = std::to_string(seed);
    echo_config(out, items);
    std::cout << "eval: overall faith_mean=" << report.overall.faith_mean
              << " faith_best=" << report.overall.faith_best << " alignment=" << report.overall.alignment;
    if (report.fid) std::cout << " fid=" << *report.fid;
    std::cout << " -> " << out << "\n";
    return 0;
}

int cmd_ablate(const std::string& what, const std::string& values_csv, const std::string& ckpt_path,
               const std::string& corpus_dir, const std::string& out, const std::string& index_path,
               const std::string& retrieval, int samples, int max_per_bucket, uint64_t seed,
               const GuidanceFlags& gf) {
    auto [model, schedule] = load_model(ckpt_path);
    Corpus corpus = load_corpus(corpus_dir);
    std::optional<Bm25Index> index;
    if (!index_path.empty()) index = Bm25Index::load(index_path);

    BenchContext ctx;
    ctx.corpus = &corpus;
    ctx.index = index ? &*index : nullptr;
    ctx.model = &model;
    ctx.schedule = &schedule;
    ctx.gcfg = gf.to_config(seed);
    ctx.retrieval = retrieval == "index" ? RetrievalMode::index : RetrievalMode::curated;
    ctx.seed = seed;

    BenchSpec bench = make_bench(corpus, what == "k", max_per_bucket);
    bench.samples_per_prompt = samples;

    fs::create_directories(out);
    AblationTable table;
    if (what == "k") {
        std::vector<int> ks;
        for (const auto& tok : tokenize(values_csv))
            ks.push_back(std::stoi(tok));
        if (ks.empty()) ks = {1, 2, 4};
        table = ablate_k(ctx, bench, ks);
    } else if (what == "eta") {
        std::vector<double> etas;
        for (const auto& tok : tokenize(values_csv)) etas.push_back(std::stod(tok));
        if (etas.empty()) etas = {0.0, 0.25, 0.5, 0.75, 1.0};
        table = ablate_eta(ctx, bench, etas);
    } else {
        raise_usage("ablate: --what must be k or eta");
    }
    table.save((fs::path(out) / ("ablate_" + what + ".tsv")).string());
    auto items = gf.items();
    items["command"] = "ablate";
    items["what"] = what;
    items["seed"] = std::to_string(seed);
    echo_config(out, items);
    std::cout << "ablation over " << what << " (" << table.entries.size() << " settings) -> " << out << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"retrieval-augmented text-to-image diffusion, desk scale"};
    app.require_subcommand(1);

    uint64_t seed = 0;
    app.add_option("--seed", seed, "top-level random seed")->default_val(0);

    // build-corpus
    auto* bc = app.add_subcommand("build-corpus", "generate the synthetic entity corpus");
    std::string bc_out;
    int bc_entities = 24, bc_canvas = 32, bc_frequent = 80, bc_infrequent = 8, bc_unseen = 2;
    bc->add_option("--out", bc_out, "output corpus directory")->required();
    bc->add_option("--entities", bc_entities, "number of entities")->default_val(bc_entities);
    bc->add_option("--canvas", bc_canvas, "canvas side (32 or 64)")->default_val(bc_canvas);
    bc->add_option("--frequent", bc_frequent, "scene images per frequent entity")->default_val(bc_frequent);
    bc->add_option("--infrequent", bc_infrequent, "scene images per infrequent entity")
        ->default_val(bc_infrequent);
    bc->add_option("--unseen", bc_unseen, "knowledge-base records per unseen entity")
        ->default_val(bc_unseen);

    // ingest
    auto* ig = app.add_subcommand("ingest", "ingest an external manifest with filtering");
    std::string ig_manifest, ig_out;
    ig->add_option("--manifest", ig_manifest, "input manifest path")->required();
    ig->add_option("--out", ig_out, "output corpus directory")->required();

    // build-index
    auto* bi = app.add_subcommand("build-index", "build the BM25 caption index");
    std::string bi_corpus, bi_out;
    double bi_k1 = 1.2, bi_b = 0.75;
    bi->add_option("--corpus", bi_corpus, "corpus directory")->required();
    bi->add_option("--out", bi_out, "output index file")->required();
    bi->add_option("--k1", bi_k1, "BM25 k1")->default_val(bi_k1);
    bi->add_option("--b", bi_b, "BM25 b")->default_val(bi_b);

    // make-knn
    auto* mk = app.add_subcommand("make-knn", "build (image, text, retrieval) training triples");
    std::string mk_corpus, mk_index, mk_out;
    int mk_k = 2;
    mk->add_option("--corpus", mk_corpus, "corpus directory")->required();
    mk->add_option("--index", mk_index, "index file")->required();
    mk->add_option("--out", mk_out, "output triples file")->required();
    mk->add_option("--k", mk_k, "neighbors per target")->default_val(mk_k);

    // train
    auto* tr = app.add_subcommand("train", "train a denoiser stage");
    std::string tr_corpus, tr_knn, tr_out, tr_stage = "base", tr_config;
    TrainConfig tr_cfg;
    tr->add_option("--corpus", tr_corpus, "corpus directory")->required();
    tr->add_option("--knn", tr_knn, "triples file from make-knn")->required();
    tr->add_option("--out", tr_out, "output directory")->required();
    tr->add_option("--stage", tr_stage, "base or sr")->default_val(tr_stage);
    tr->add_option("--config", tr_config, "key=value config file (flags override)");
    tr->add_option("--steps", tr_cfg.steps, "optimization steps")->default_val(tr_cfg.steps);
    tr->add_option("--batch", tr_cfg.batch_size, "batch size")->default_val(tr_cfg.batch_size);
    tr->add_option("--lr", tr_cfg.learning_rate, "learning rate")->default_val(tr_cfg.learning_rate);
    tr->add_option("--drop-text", tr_cfg.drop_text_prob, "text condition dropout probability")
        ->default_val(tr_cfg.drop_text_prob);
    tr->add_option("--drop-neighbors", tr_cfg.drop_neighbors_prob, "neighbor condition dropout probability")
        ->default_val(tr_cfg.drop_neighbors_prob);
    tr->add_option("--k", tr_cfg.k_neighbors, "neighbors per example")->default_val(tr_cfg.k_neighbors);
    tr->add_option("--checkpoint-every", tr_cfg.checkpoint_every, "checkpoint interval")
        ->default_val(tr_cfg.checkpoint_every);
    tr->add_option("--threads", tr_cfg.threads, "worker threads (0 = auto)")->default_val(tr_cfg.threads);

    // sample
    auto* sm = app.add_subcommand("sample", "sample images from a checkpoint");
    std::string sm_ckpt, sm_corpus, sm_prompt, sm_out, sm_index, sm_entity, sm_srckpt;
    bool sm_noret = false;
    int sm_k = 2, sm_count = 1;
    GuidanceFlags sm_gf;
    sm->add_option("--checkpoint", sm_ckpt, "denoiser checkpoint")->required();
    sm->add_option("--corpus", sm_corpus, "corpus directory (vocabulary + knowledge base)")->required();
    sm->add_option("--prompt", sm_prompt, "text prompt")->required();
    sm->add_option("--out", sm_out, "output directory")->required();
    sm->add_option("--index", sm_index, "BM25 index for retrieval");
    sm->add_option("--entity", sm_entity, "curated retrieval: use this entity's knowledge-base records");
    sm->add_flag("--no-retrieval", sm_noret, "drop the neighbor condition");
    sm->add_option("--k", sm_k, "neighbors to retrieve")->default_val(sm_k);
    sm->add_option("--count", sm_count, "number of samples")->default_val(sm_count);
    sm->add_option("--sr-checkpoint", sm_srckpt, "run the cascade through this SR checkpoint");
    sm_gf.attach(sm);

    // eval
    auto* ev = app.add_subcommand("eval", "run the entity benchmark");
    std::string ev_ckpt, ev_corpus, ev_out, ev_index, ev_retrieval = "curated", ev_bench = "canonical";
    int ev_samples = 4, ev_maxpb = 0, ev_k = 2;
    bool ev_drop = false, ev_fid = false;
    GuidanceFlags ev_gf;
    ev->add_option("--checkpoint", ev_ckpt, "denoiser checkpoint")->required();
    ev->add_option("--corpus", ev_corpus, "corpus directory")->required();
    ev->add_option("--out", ev_out, "output directory")->required();
    ev->add_option("--index", ev_index, "BM25 index (required for --retrieval index)");
    ev->add_option("--retrieval", ev_retrieval, "index or curated")->default_val(ev_retrieval);
    ev->add_option("--bench", ev_bench, "canonical or scene")->default_val(ev_bench);
    ev->add_option("--samples", ev_samples, "samples per prompt")->default_val(ev_samples);
    ev->add_option("--max-per-bucket", ev_maxpb, "cap entities per bucket (0 = all)")->default_val(ev_maxpb);
    ev->add_option("--k", ev_k, "neighbors to retrieve")->default_val(ev_k);
    ev->add_flag("--drop-neighbors", ev_drop, "force the neighbor condition off");
    ev->add_flag("--fid", ev_fid, "also compute the FID proxy against corpus images");
    ev_gf.attach(ev);

    // ablate
    auto* ab = app.add_subcommand("ablate", "K or eta ablation over the benchmark");
    std::string ab_what = "k", ab_values, ab_ckpt, ab_corpus, ab_out, ab_index, ab_retrieval = "curated";
    int ab_samples = 4, ab_maxpb = 0;
    GuidanceFlags ab_gf;
    ab->add_option("--what", ab_what, "k or eta")->required();
    ab->add_option("--values", ab_values, "space-separated values (defaults: k={1,2,4}, eta={0,.25,.5,.75,1})");
    ab->add_option("--checkpoint", ab_ckpt, "denoiser checkpoint")->required();
    ab->add_option("--corpus", ab_corpus, "corpus directory")->required();
    ab->add_option("--out", ab_out, "output directory")->required();
    ab->add_option("--index", ab_index, "BM25 index");
    ab->add_option("--retrieval", ab_retrieval, "index or curated")->default_val(ab_retrieval);
    ab->add_option("--samples", ab_samples, "samples per prompt")->default_val(ab_samples);
    ab->add_option("--max-per-bucket", ab_maxpb, "cap entities per bucket (0 = all)")->default_val(ab_maxpb);
    ab_gf.attach(ab);

    try {
        app.parse(argc, argv);
        if (bc->parsed())
            return cmd_build_corpus(bc_out, bc_entities, bc_canvas, bc_frequent, bc_infrequent, bc_unseen,
                                    seed);
        if (ig->parsed()) return cmd_ingest(ig_manifest, ig_out);
        if (bi->parsed()) return cmd_build_index(bi_corpus, bi_out, bi_k1, bi_b);
        if (mk->parsed()) return cmd_make_knn(mk_corpus, mk_index, mk_out, mk_k);
        if (tr->parsed()) {
            tr_cfg.seed = seed;
            return cmd_train(tr, tr_corpus, tr_knn, tr_out, tr_stage, tr_cfg, tr_config);
        }
        if (sm->parsed())
            return cmd_sample(sm_ckpt, sm_corpus, sm_prompt, sm_out, sm_index, sm_entity, sm_noret, sm_k,
                              sm_count, seed, sm_gf, sm_srckpt);
        if (ev->parsed())
            return cmd_eval(ev_ckpt, ev_corpus, ev_out, ev_index, ev_retrieval, ev_bench, ev_samples,
                            ev_maxpb, ev_k, ev_drop, ev_fid, seed, ev_gf);
        if (ab->parsed())
            return cmd_ablate(ab_what, ab_values, ab_ckpt, ab_corpus, ab_out, ab_index, ab_retrieval,
                              ab_samples, ab_maxpb, seed, ab_gf);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : kUsageError;
    } catch (const Error& e) {
        std::cerr << "error code=" << e.code() << ": " << e.what() << "\n";
        return e.code();
    } catch (const std::exception& e) {
        std::cerr << "error code=" << kDataError << ": " << e.what() << "\n";
        return kDataError;
    }
    return 0;
}
