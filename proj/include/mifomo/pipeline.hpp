#pragma once

// End-to-end driver: run configuration, the source phase, the target
// intermediate phase, evaluation, reports and the gradient check.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mifomo/encoder.hpp"
#include "mifomo/episodic.hpp"
#include "mifomo/hsidata.hpp"
#include "mifomo/mixup.hpp"
#include "mifomo/pseudolabel.hpp"

namespace mifomo {

enum class Variant {
  /// Source checkpoint, plain nearest-prototype evaluation.
  SourceOnly,
  /// Source checkpoint, smoothed evaluation.
  NoIntermediate,
  /// Intermediate phase with raw nearest-prototype pseudo-labels, plain
  /// evaluation.
  NoSmoothing,
  Full,
};

const char* variant_name(Variant v) noexcept;
/// Throws ConfigError("variant") for an unknown name.
Variant parse_variant(const std::string& name);

struct RunConfig {
  std::uint64_t seed = 7;
  std::size_t trials = 20;
  Variant variant = Variant::Full;

  /// 0 selects min(C_S, C_T).
  std::size_t n_way = 0;
  std::size_t k_shot = 5;
  std::size_t q_query = 15;

  std::size_t source_episodes = 400;
  /// Leading source episodes with the backbone trainable.
  std::size_t warmup_episodes = 300;
  double warmup_lr = 1e-2;

  std::size_t e_outer = 5;
  std::size_t e_inner = 100;
  std::size_t k_s = 3;
  std::size_t k_q = 2;
  double lr = 1e-2;
  double momentum = 0.9;
  /// Global gradient-norm clip; 0 disables it.
  double clip_norm = 5.0;

  /// Pseudo-labels kept per class; 0 selects q_query.
  std::size_t topk_per_class = 0;
  /// Unlabeled target pixels scored per intermediate episode.
  std::size_t pseudo_batch = 256;
  /// Query rows per propagation graph at evaluation.
  std::size_t smoothing_batch = 256;
  /// Rows per forward pass when embedding many pixels.
  std::size_t embed_batch = 256;

  std::size_t pca_bands = 50;

  EncoderConfig encoder;
  MixupConfig mixup;
  /// Smoothing graphs are built with σ at a tenth of the median distance.
  PropagationConfig propagation{.median_scale = 0.1};
  GeneratorSpec generator;

  std::size_t ways() const noexcept;
  std::size_t topk() const noexcept { return topk_per_class == 0 ? q_query : topk_per_class; }

  /// Checks every field; throws ConfigError naming the offending key.
  void validate() const;
};

/// Applies one "key = value" setting. Throws ConfigError for unknown keys or
/// unparsable values.
void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value);
/// Parses a key-value file body: one "key = value" per line, '#' comments.
void apply_config_text(RunConfig& cfg, const std::string& text);
RunConfig load_config(const std::string& path);
/// Every key with its current value, in a stable order.
std::vector<std::pair<std::string, std::string>> config_entries(const RunConfig& cfg);
std::string config_text(const RunConfig& cfg);

/// Heavy-ball SGD: v ← μv + g, p ← p − ηv on the watched parameters.
class SgdMomentum {
 public:
  SgdMomentum(double lr, double momentum, double clip_norm = 0.0) : lr_(lr), momentum_(momentum), clip_(clip_norm) {}

  void set_lr(double lr) noexcept { lr_ = lr; }
  /// Returns the gradient norm before clipping.
  double step(EncoderParams& params, const ParamBinding& binding, const Gradients& grads);

 private:
  double lr_, momentum_, clip_;
  std::map<std::string, std::vector<double>> velocity_;
};

struct Datasets {
  CubeDataset source;
  CubeDataset target;
};

/// Synthetic pair reduced to cfg.pca_bands by a PCA fitted on each domain.
Datasets make_datasets(const RunConfig& cfg);

/// Embeddings of the given pixels without a tape: [n × D].
Tensor embed_pixels(const EncoderParams& params, const CubeDataset& ds, std::span<const std::size_t> pixels,
                    std::size_t batch);

struct SourcePhaseResult {
  EncoderParams params;
  std::vector<double> losses;
};

/// Warm-up episodes with everything trainable, then the remaining episodes
/// with the backbone frozen. The result is in the adaptation phase.
SourcePhaseResult run_source_phase(const RunConfig& cfg, const CubeDataset& source);

struct TargetSupport {
  std::vector<std::size_t> pixels;
  /// 0-based target class per support pixel.
  std::vector<int> labels;
};

/// K labeled pixels per target class. Throws SamplingError naming a class with
/// fewer than K labeled pixels.
TargetSupport sample_target_support(const CubeDataset& target, std::size_t k_shot, Rng& rng);

/// Seed of trial t; the trial's support and adaptation draw from it.
std::uint64_t trial_seed(const RunConfig& cfg, std::size_t trial);

struct IntermediateResult {
  EncoderParams params;
  std::vector<ScheduleTraceRow> schedule;
  std::vector<double> losses;
  /// One line per inner episode: selected pseudo-labels per class.
  std::vector<std::string> audit;
};

/// Target adaptation loop: support-split training, pseudo-labelling,
/// source/target mixing and the λ₂ schedule. `smoothing` chooses propagated
/// over raw nearest-prototype pseudo-labels.
IntermediateResult run_intermediate_phase(const RunConfig& cfg, const EncoderParams& checkpoint,
                                          const CubeDataset& source, const CubeDataset& target,
                                          const TargetSupport& support, bool smoothing, Rng& rng);

/// Samples trial t's support and runs the intermediate phase on it.
IntermediateResult adapt_trial(const RunConfig& cfg, const EncoderParams& checkpoint, const Datasets& data,
                               std::size_t trial, bool smoothing);

struct TrialResult {
  std::uint64_t seed = 0;
  Metrics metrics;
  std::vector<std::optional<double>> per_class;
  ConfusionMatrix confusion;
  std::size_t scored = 0;
};

/// Scores every labeled target pixel outside the support. With `smoothing`
/// the predictions are propagated over batches of smoothing_batch rows.
TrialResult evaluate_support(const RunConfig& cfg, const EncoderParams& params, const CubeDataset& target,
                             const TargetSupport& support, bool smoothing, Rng& rng,
                             std::vector<std::uint32_t>* prediction_map = nullptr);

struct RunReport {
  std::string variant;
  std::vector<TrialResult> trials;
  Metrics mean;
  /// Population standard deviation over trials.
  Metrics stddev;
  std::vector<std::optional<double>> per_class_mean;
  std::vector<std::string> class_names;
  std::vector<ScheduleTraceRow> schedule;  // first trial
  std::string schedule_path;
  std::string checkpoint_path;
  std::vector<std::pair<std::string, double>> timings;  // seconds; not part of the report files
};

void summarize(RunReport& report);
std::string report_text(const RunReport& report);
std::string report_kv(const RunReport& report);

struct ExperimentHooks {
  /// Called with the adapted parameters of each trial.
  std::function<void(std::size_t trial, const EncoderParams&)> on_adapted;
  /// Called with trial 0's prediction raster (h·W + w → class, 0 unscored).
  std::function<void(const std::vector<std::uint32_t>&)> on_prediction_map;
};

/// Runs cfg.trials trials of the given variant from a source checkpoint.
RunReport run_trials(const RunConfig& cfg, Variant variant, const Datasets& data, const EncoderParams& source_ckpt,
                     const ExperimentHooks& hooks = {});

struct GradGroup {
  std::string name;
  double rel_error = 0.0;
  bool skipped = false;
};

struct GradcheckReport {
  std::vector<GradGroup> groups;
  double worst = 0.0;
  bool passed = false;
  double threshold = 1e-3;
};

struct GradcheckOptions {
  /// Check the backbone too (warm-up phase) instead of only the adapted groups.
  bool all_groups = false;
  double step = 1e-5;
  double threshold = 1e-3;
  std::uint64_t seed = 3;
  /// Test fixture: may alter a group's analytic gradient before comparison.
  std::function<void(const std::string& name, std::vector<double>& grad)> tamper;
};

/// Tiny encoder (two layers, width 16, two heads) on a 2-way episode; compares
/// tape gradients with central differences per parameter group.
GradcheckReport gradcheck(const GradcheckOptions& options = {});
EncoderConfig gradcheck_encoder_config();

}  // namespace mifomo
