#pragma once

#include "ragdiff/checkpoint.hpp"
#include "ragdiff/corpus.hpp"
#include "ragdiff/denoiser.hpp"
#include "ragdiff/diffusion.hpp"
#include "ragdiff/retrieval.hpp"

#include <string>
#include <vector>

namespace ragdiff {

enum class Stage { base, super_resolution };

struct TrainConfig {
    int64_t steps = 1000;
    int batch_size = 32;
    double learning_rate = 1e-4;
    double drop_text_prob = 0.1;
    double drop_neighbors_prob = 0.1;
    int k_neighbors = 2;
    uint64_t seed = 0;
    int64_t checkpoint_every = 1000;
    double clip_norm = 1.0;
    int threads = 0;  // 0 = hardware concurrency

    void validate() const;
};

struct TrainResult {
    std::vector<double> loss_log;  // one entry per step
    int64_t steps = 0;
    std::string final_checkpoint;  // empty when out_dir is empty
    bool aborted_non_finite = false;
};

Denoiser<float> make_stage_model(const Corpus& corpus, Stage stage, uint64_t seed);

/// Optimizes the denoiser on KNN triples with independent per-example
/// condition dropout (Bernoulli, default 10% each). The loss trajectory is
/// deterministic for a fixed seed regardless of thread count: all randomness
/// is drawn up-front on one thread and per-example gradients are reduced in
/// batch order. Emits `loss_log.txt` (step<TAB>loss) and periodic checkpoints
/// when out_dir is non-empty; aborts on a non-finite loss, keeping the last
/// good checkpoint.
TrainResult train(Denoiser<float>& model, const Corpus& corpus, const std::vector<KnnTriple>& triples,
                  const TrainConfig& cfg, Stage stage, const NoiseSchedule& schedule,
                  const std::string& out_dir);

/// One example's loss and parameter gradients (appended into `grad_out`,
/// which must have Denoiser::params().total_size() entries).
float example_loss_and_grad(const Denoiser<float>& model, const Tensor<float>& x0,
                            const Conditioning<float>& cond, int t, const Tensor<float>& eps,
                            const NoiseSchedule& schedule, std::vector<float>* grad_out);

/// Training-time condition dropout: one independent Bernoulli draw per flag.
std::pair<bool, bool> sample_drop_flags(RandomStream& text_rs, RandomStream& neighbor_rs, double p_text,
                                        double p_neighbors);

/// Builds the conditioning bundle for one triple at the given stage.
Conditioning<float> make_conditioning(const Corpus& corpus, const KnnTriple& triple, int k, Stage stage);

/// Training target for one triple (the record image; for the SR stage the
/// conditioning carries its 2x box downsample as c_x).
Tensor<float> training_target(const Corpus& corpus, const KnnTriple& triple);

}  // namespace ragdiff
