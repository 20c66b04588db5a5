#pragma once

#include "recurf/data.hpp"
#include "recurf/field.hpp"
#include "recurf/loss.hpp"
#include "recurf/render.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace recurf {

enum class Ablation { none, no_early_termination, no_branch, random_division };

/// Accepts both "no-branch" and "no_branch" spellings.
Ablation parse_ablation(const std::string& tag);
std::string ablation_name(Ablation a);

enum class LrSchedule {
  step,         // lr * decay once 5/6 of the run has passed
  exponential,  // lr * decay^(iter / (5/6 total)), continuous
};

struct TrainConfig {
  int total_iters = 20000;
  int batch_rays = 4096;
  int n_coarse = 64;
  int n_fine = 128;
  double lr = 5e-4;
  LrSchedule lr_schedule = LrSchedule::step;
  double lr_decay_factor = 0.1;
  double lr_decay_fraction = 5.0 / 6.0;
  std::vector<int> stage_depths{2, 2, 4, 4};
  std::vector<int> k_per_growth{2, 2, 2};
  std::vector<double> growth_fractions{0.25, 0.5, 0.75};
  double epsilon = 1e-3;
  LossWeights weights;
  std::uint64_t seed = 0;
  Ablation ablation = Ablation::none;

  FieldConfig field;
  /// Candidate grid resolution (per axis) for uncertain-point sampling.
  int growth_grid = 32;
  std::size_t growth_cap = 131072;
  /// Jitter stratified samples and draw random fine quantiles.
  bool perturb = true;
  /// Fraction of the run between validation passes; 0 disables them.
  double validation_every = 0.1;
  int validation_views = 2;
  int render_threads = 1;

  /// Throws std::invalid_argument describing the first violated invariant.
  void validate() const;
};

/// Settings sized for a single desktop core: the default schedule with
/// smaller batches and sample counts.
TrainConfig desk_config();

/// Effective settings after an ablation is applied.
struct Schedule {
  std::vector<int> k_per_growth;
  Division division = Division::kmeans;
  /// Epsilon used for inference renders of this run.
  double inference_epsilon = 1e-3;
};

Schedule apply_ablation(const TrainConfig& config);

double learning_rate(const TrainConfig& config, int iter);
/// Iteration at which growth event g fires.
int growth_iteration(const TrainConfig& config, std::size_t g);

std::string config_to_json(const TrainConfig& config);
/// Keys absent from `json_text` keep the values of `base`.
TrainConfig config_from_json(const std::string& json_text, const TrainConfig& base = {});
std::uint64_t fnv1a(const std::string& bytes);

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  TrainConfig config;
  ModelTree model;
  int iteration = 0;
  /// Growth events already applied.
  int growths = 0;
  std::mt19937_64 rng;
};

/// Fresh model for `config`; field bounds are taken from the dataset.
Checkpoint init_checkpoint(const TrainConfig& config, const Dataset& dataset);

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(const std::string& bytes);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

struct TrainRecord {
  int iter = 0;
  double lr = 0.0;
  double loss = 0.0;
  /// Mean per-ray squared error at the deepest exit of each pass.
  double coarse_mse = 0.0;
  double fine_mse = 0.0;
  double fine_l_se = 0.0;
  double fine_l_0 = 0.0;
  int depth = 1;
  /// NaN unless a validation pass ran after this iteration.
  double val_psnr = 0.0;
  double val_psnr_full = 0.0;
};

std::string trail_csv(const std::vector<TrainRecord>& trail);

struct GrowthEvent {
  int iter = 0;
  std::string tree;  // "coarse" or "fine"
  int stage_index = 0;
  std::size_t uncertain_points = 0;
  GrowthResult result;
};

struct TrainHooks {
  std::function<void(const TrainRecord&)> on_record;
  std::function<void(const GrowthEvent&)> on_growth;
  /// Called every `checkpoint_every` iterations when both are set.
  std::function<void(const Checkpoint&)> on_checkpoint;
  int checkpoint_every = 0;
};

struct TrainResult {
  std::vector<TrainRecord> trail;
  std::vector<GrowthEvent> growth_events;
};

/// Runs iterations ckpt.iteration .. config.total_iters - 1 in place.
/// Non-finite losses abort with std::runtime_error naming the iteration.
TrainResult train(Checkpoint& ckpt, const Dataset& dataset, const TrainHooks& hooks = {});

/// Applies growth event `g` to both trees immediately. `extra_candidates`
/// supplements the regular grid.
std::vector<GrowthEvent> grow_model(Checkpoint& ckpt, std::size_t g,
                                    const std::vector<Eigen::Vector3d>& extra_candidates);

/// Mean PSNR over the first `views` test views (train views if there is no
/// test split).
double validation_psnr(const ModelTree& model, const Dataset& dataset, const RenderOptions& options,
                       int views);

RenderOptions render_options_for(const TrainConfig& config, double epsilon);

struct SweepRow {
  int depth = 0;
  int width = 0;
  int resolution = 0;
  std::uint64_t seed = 0;
  double psnr = 0.0;
};

struct SweepConfig {
  std::vector<int> depths{2, 4};
  std::vector<int> widths{16, 64};
  std::vector<int> resolutions{16, 32, 64};
  std::vector<std::uint64_t> seeds{0};
  int views = 20;
  TrainConfig base;
};

/// Trains single-stage models for every grid cell and seed and scores them
/// on the held-out views. Rows come out in depth, width, resolution, seed
/// order.
std::vector<SweepRow> capacity_sweep(const SceneSpec& scene, const SweepConfig& sweep,
                                     const std::function<void(const SweepRow&)>& on_row = {});

/// depth,width,resolution,psnr averaged over seeds, one row per cell.
std::string sweep_csv(const std::vector<SweepRow>& rows);

}  // namespace recurf
