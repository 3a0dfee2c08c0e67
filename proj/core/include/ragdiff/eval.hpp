#pragma once

#include "ragdiff/checkpoint.hpp"
#include "ragdiff/corpus.hpp"
#include "ragdiff/denoiser.hpp"
#include "ragdiff/guidance.hpp"
#include "ragdiff/retrieval.hpp"

#include <optional>
#include <string>
#include <vector>

namespace ragdiff {

/// Small convolutional entity classifier. Doubles as the feature model for
/// the Frechet score (penultimate activations) and is trained once per
/// corpus, checkpointed alongside it.
class EntityClassifier {
  public:
    EntityClassifier(int image_size, int n_classes);
    explicit EntityClassifier(const ArchDescriptor& arch);

    const ArchDescriptor& arch() const { return arch_; }
    ParamStore<float>& params() { return params_; }
    const ParamStore<float>& params() const { return params_; }

    void init_params(uint64_t seed);

    Tensor<float> features(const Tensor<float>& image) const;  // {feature_dim}
    Tensor<float> logits(const Tensor<float>& image) const;
    int classify(const Tensor<float>& image) const;

    float loss_and_grad(const Tensor<float>& image, int label, std::vector<float>* grad_out) const;

    void save(const std::string& path) const;
    static EntityClassifier load(const std::string& path);

    /// Cross-entropy training over all entity-labelled corpus records.
    static EntityClassifier train(const Corpus& corpus, int64_t steps, uint64_t seed, int threads = 0);

    /// Loads `classifier.ckpt` from the corpus directory, training and saving
    /// it first if absent.
    static EntityClassifier load_or_train(const Corpus& corpus, const std::string& corpus_dir,
                                          int64_t steps = 3000, uint64_t seed = 17);

  private:
    using Id = Graph<float>::Id;
    struct Nodes {
        Id features, logits;
    };
    Nodes build(Graph<float>& g, typename Denoiser<float>::BuildCtx* /*unused*/, const Tensor<float>& image,
                bool with_grad, std::map<int, Id>* param_nodes) const;

    ArchDescriptor arch_;
    ParamStore<float> params_;
    int conv_w_[3], conv_b_[3], gn_g_[3], gn_b_[3];
    int fc1_w_, fc1_b_, fc2_w_, fc2_b_;
    void build_params();
};

// ---- oracles ----

/// Canonical prototype renders for every entity, index-aligned with
/// corpus.entities.
std::vector<Tensor<float>> render_prototypes(const std::vector<EntitySpec>& entities, int canvas);

/// Nearest prototype by pixel MSE; ties break to the lowest entity index.
int classify_entity(const Tensor<float>& image, const std::vector<Tensor<float>>& prototypes);

/// Fraction of images whose nearest prototype is `entity_idx`.
double entity_faithfulness(const std::vector<Tensor<float>>& images, int entity_idx,
                           const std::vector<Tensor<float>>& prototypes);

/// Background classified from the mean color of a 2px border ring against the
/// six scene colors.
int classify_background(const Tensor<float>& image);

/// Fraction of images whose classified background matches the scene's.
double text_alignment(const std::vector<Tensor<float>>& images, const SceneSpec& scene);

/// True when the border ring is nearer the canonical gray than any scene
/// color (used for canonical-scene report rows).
bool background_is_canonical(const Tensor<float>& image);

// ---- Frechet metric ----

/// ||mu1-mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)) over feature rows; 1e-6 I is
/// added to each covariance before the matrix square root.
double frechet_distance(const std::vector<std::vector<double>>& feats_a,
                        const std::vector<std::vector<double>>& feats_b);

/// Frechet distance between classifier features of two image sets (each at
/// least 200 images).
double fid_proxy(const EntityClassifier& model, const std::vector<Tensor<float>>& gen_images,
                 const std::vector<Tensor<float>>& ref_images);

// ---- benchmark ----

struct BenchSpec {
    std::vector<std::string> entity_ids;  // spans all frequency buckets
    int samples_per_prompt = 4;
    bool canonical_scene = true;  // gray/centered prompts; false varies backgrounds
};

/// All corpus entities (optionally capped per bucket, spanning every bucket).
BenchSpec make_bench(const Corpus& corpus, bool canonical_scene, int max_entities_per_bucket = 0);

enum class RetrievalMode { index, curated };

struct BenchRow {
    std::string entity_id;
    Bucket bucket = Bucket::frequent;
    int template_idx = 0;
    std::string prompt;
    SceneSpec scene;
    double faith_mean = 0, faith_best = 0, alignment = 0;
    bool skipped = false;
};

struct BucketAgg {
    double faith_mean = 0, faith_best = 0, alignment = 0;
    int rows = 0;
};

struct EvalReport {
    std::vector<BenchRow> rows;
    BucketAgg overall, frequent, infrequent, unseen, infrequent_and_unseen;
    std::optional<double> fid;

    void compute_aggregates();
    void save(const std::string& dir, const std::string& name) const;
};

struct BenchContext {
    const Corpus* corpus = nullptr;
    const Bm25Index* index = nullptr;  // required for RetrievalMode::index
    const Denoiser<float>* model = nullptr;
    const NoiseSchedule* schedule = nullptr;
    GuidanceConfig gcfg;
    RetrievalMode retrieval = RetrievalMode::curated;
    int k = 2;
    bool force_drop_neighbors = false;  // paired no-retrieval runs
    uint64_t seed = 0;
    int threads = 0;
};

/// Samples `samples_per_prompt` images per (entity, template) prompt, scores
/// faithfulness (and alignment on scene prompts), and aggregates by frequency
/// bucket. Entities without a knowledge-base record are skipped and flagged.
EvalReport run_bench(const BenchContext& ctx, const BenchSpec& bench, const std::string& out_dir = "");

struct AblationTable {
    std::string axis;
    std::vector<std::pair<double, EvalReport>> entries;
    void save(const std::string& path) const;
};

AblationTable ablate_k(const BenchContext& ctx, const BenchSpec& bench, const std::vector<int>& k_values);
AblationTable ablate_eta(const BenchContext& ctx, const BenchSpec& bench, const std::vector<double>& etas);

// ---- directional statistics ----

/// Spearman rank correlation of `values` against the monotone ideal
/// (1..n increasing, or reversed); average ranks on ties, 1.0 when values
/// are constant.
double spearman_against_monotone(const std::vector<double>& values, bool increasing);

/// Monotone-direction check allowing `max_inversions` adjacent inversions of
/// at most `max_inversion_magnitude` each, plus a Spearman floor.
bool directional_pass(const std::vector<double>& values, bool increasing, int max_inversions,
                      double max_inversion_magnitude, double min_spearman);

}  // namespace ragdiff
