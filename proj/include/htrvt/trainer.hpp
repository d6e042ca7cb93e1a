#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "htrvt/charset.hpp"
#include "htrvt/checkpoint.hpp"
#include "htrvt/config.hpp"
#include "htrvt/dataset.hpp"
#include "htrvt/metrics.hpp"
#include "htrvt/model.hpp"
#include "htrvt/optim.hpp"

namespace htr {

/// Epoch-wise shuffled sample order drawn from its own generator.
struct Sampler {
  Rng rng;
  std::uint64_t epoch = 0;
  std::vector<std::size_t> order;
  std::size_t cursor = 0;

  /// Next `count` indices into a dataset of `size` samples, reshuffling at
  /// every epoch boundary.
  std::vector<std::size_t> next(std::size_t count, std::size_t size);
};

/// Everything a run carries from one iteration to the next. Checkpoints hold
/// exactly this, so a restored state continues bit-identically.
struct TrainingState {
  TrainConfig config;
  Charset charset;
  std::unique_ptr<HtrModel<float>> model;
  optim::AdamWState<float> adam;
  optim::EmaState<float> ema;
  std::uint64_t iteration = 0;
  Sampler sampler;
  std::uint32_t nonfinite_streak = 0;
  double best_val_cer = INFINITY;
  std::uint64_t best_iter = 0;

  /// Fresh model initialised from the config seed.
  TrainingState(TrainConfig cfg, Charset cs);

  Checkpoint to_checkpoint() const;
  /// Rejects tensors the model does not have and reports any it lacks.
  static std::unique_ptr<TrainingState> from_checkpoint(const Checkpoint& c);
};

struct StepOutcome {
  double loss = 0.0;
  double lr = 0.0;
  bool stepped = false;
  std::size_t masked_tokens = 0;
};

/// Number of consecutive non-finite steps that aborts training.
inline constexpr std::uint32_t kMaxNonFiniteSteps = 3;

/// Builds the training batch for the state's current iteration: sampler
/// order, per-sample augmentation seeds derived from (seed, iteration, slot).
Batch next_training_batch(TrainingState& s, const std::vector<Sample>& data);

/// Span masks (per sample, from a generator seeded by (seed, iteration)),
/// forward, mean CTC, SAM-wrapped AdamW at lr_at(iteration) and the EMA
/// update. Mask and batch stay fixed across both SAM passes. Non-finite losses
/// skip the update; the third in a row throws. Advances the iteration.
StepOutcome train_step(TrainingState& s, const Batch& batch);

struct EvalResult {
  metrics::CorpusRates rates;
  std::vector<std::string> predictions;
  /// Reference characters the charset cannot produce.
  std::size_t unknown_chars = 0;
};

/// Greedy-decodes every sample in eval mode. With use_ema the shadow weights
/// are swapped in for the duration of the call; the model is left unchanged.
EvalResult evaluate(TrainingState& s, const std::vector<Sample>& data, bool use_ema);

struct Prediction {
  std::string text;
  Tensor<float> log_probs;                 // [L, K+1]
  std::vector<Tensor<float>> attention;    // per block, [heads, L, L]
};

Prediction predict(TrainingState& s, const Image& image, bool use_ema, bool keep_attention = false);

struct RunOptions {
  /// Stop after this iteration (defaults to the schedule's total).
  std::optional<std::uint64_t> until;
  std::ostream* progress = nullptr;
};

/// The training loop: logs iter,loss,lr,val_cer,val_wer to out_dir/metrics.csv,
/// validates the EMA weights every val_every iterations and keeps best.ckpt,
/// and writes last.ckpt every checkpoint_every iterations and at the end.
void run_training(TrainingState& s, const std::vector<Sample>& train, const std::vector<Sample>& val,
                  const RunOptions& opt);

}  // namespace htr
