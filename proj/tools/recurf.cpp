#include "recurf/data.hpp"
#include "recurf/metrics.hpp"
#include "recurf/trainer.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace recurf;

namespace {

enum class LogLevel { error = 0, warn = 1, info = 2, debug = 3 };

LogLevel log_level() {
  const char* env = std::getenv("RECURF_LOG");
  const std::string v = env != nullptr ? env : "info";
  if (v == "error") return LogLevel::error;
  if (v == "warn") return LogLevel::warn;
  if (v == "debug") return LogLevel::debug;
  return LogLevel::info;
}

void log(LogLevel level, const std::string& msg) {
  static const LogLevel threshold = log_level();
  if (level > threshold) return;
  static const char* names[] = {"error", "warn", "info", "debug"};
  std::cerr << "[" << names[static_cast<int>(level)] << "] " << msg << '\n';
}

std::string timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

struct Manifest {
  std::string command;
  json config = json::object();
  std::uint64_t seed = 0;
  std::string started = timestamp();
  std::vector<std::string> outputs;
  json extra = json::object();

  void write(const fs::path& dir) const {
    json j;
    j["command"] = command;
    j["config"] = config;
    j["config_digest"] = hex64(fnv1a(config.dump()));
    j["seed"] = seed;
    j["started_at"] = started;
    j["finished_at"] = timestamp();
    j["outputs"] = outputs;
    for (const auto& item : extra.items()) j[item.key()] = item.value();
    std::ofstream out(dir / "manifest.json");
    if (!out) throw std::runtime_error("cannot write " + (dir / "manifest.json").string());
    out << j.dump(2) << '\n';
  }
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const Eigen::Vector3d kStageColors[] = {
    {0.20, 0.35, 0.90}, {0.15, 0.75, 0.30}, {0.95, 0.85, 0.15}, {0.90, 0.20, 0.15},
    {0.70, 0.30, 0.85}, {0.10, 0.80, 0.85}, {0.95, 0.55, 0.10}, {0.55, 0.55, 0.55}};

Eigen::Vector3d stage_color(int stage) {
  constexpr int n = sizeof(kStageColors) / sizeof(kStageColors[0]);
  return kStageColors[(stage - 1) % n];
}

/// False-color map of exit stages with a legend strip underneath: one
/// swatch per stage, left to right from stage 1.
Image exit_map_image(const std::vector<int>& exit_map, int width, int height, int depth) {
  const int strip = std::max(4, height / 8);
  Image img(width, height + strip, 1.0);
  for (int r = 0; r < height; ++r)
    for (int c = 0; c < width; ++c) {
      const Eigen::Vector3d col = stage_color(exit_map[static_cast<std::size_t>(r) * width + c]);
      for (int ch = 0; ch < 3; ++ch) img.at(r, c, ch) = col[ch];
    }
  for (int d = 1; d <= depth; ++d) {
    const int c0 = (d - 1) * width / depth, c1 = d * width / depth;
    const Eigen::Vector3d col = stage_color(d);
    for (int r = height + 1; r < height + strip; ++r)
      for (int c = c0 + 1; c < c1 - 1; ++c)
        for (int ch = 0; ch < 3; ++ch) img.at(r, c, ch) = col[ch];
  }
  return img;
}

std::vector<std::size_t> split_views(const Dataset& ds, const std::string& split) {
  Split s = Split::test;
  if (split == "train") {
    s = Split::train;
  } else if (split == "val") {
    s = Split::val;
  } else if (split != "test") {
    throw CLI::ValidationError("--split", "must be train, test or val");
  }
  auto idx = ds.indices(s);
  if (idx.empty()) throw std::runtime_error("dataset has no " + split + " views");
  return idx;
}

RenderOptions options_from(const Checkpoint& ck, const std::string& mode, double epsilon, int threads) {
  RenderOptions opt = render_options_for(ck.config, epsilon);
  opt.threads = threads;
  if (mode == "full-depth") {
    opt.mode = RenderMode::full_depth;
  } else if (mode == "per-stage") {
    opt.per_stage_images = true;
  }
  return opt;
}

// -- Subcommands ------------------------------------------------------------------

struct MakeSceneArgs {
  std::string scene = "cornell-mini";
  std::string out;
  int views = 50;
  int resolution = 64;
  std::uint64_t seed = 0;
};

void cmd_make_scene(const MakeSceneArgs& a) {
  const SceneSpec spec = resolve_scene(a.scene);
  log(LogLevel::info, "rendering " + std::to_string(a.views) + " views of '" + spec.name + "' at " +
                          std::to_string(a.resolution) + "px");
  const Dataset ds = make_dataset(spec, a.views, a.resolution, a.seed);
  const fs::path out = a.out;
  write_blender_dataset(out, ds);
  save_scene(spec, out / "scene.json");
  Manifest m;
  m.command = "make-scene";
  m.config = {{"scene", a.scene}, {"views", a.views}, {"resolution", a.resolution}, {"seed", a.seed}};
  m.seed = a.seed;
  m.outputs = {"transforms_train.json", "transforms_test.json", "train/", "test/", "scene.json"};
  m.extra["train_views"] = ds.indices(Split::train).size();
  m.extra["test_views"] = ds.indices(Split::test).size();
  m.write(out);
  log(LogLevel::info, std::to_string(ds.indices(Split::train).size()) + " train / " +
                          std::to_string(ds.indices(Split::test).size()) + " test views written to " + out.string());
}

struct TrainArgs {
  std::string data;
  std::string out;
  std::string config;
  int iters = 0;
  double epsilon = 0.0;
  std::uint64_t seed = 0;
  int threads = 1;
  int batch = 0;
  std::string ablation = "none";
  CLI::Option* iters_opt = nullptr;
  CLI::Option* epsilon_opt = nullptr;
  CLI::Option* seed_opt = nullptr;
  CLI::Option* batch_opt = nullptr;
  CLI::Option* ablation_opt = nullptr;
  CLI::Option* threads_opt = nullptr;
};

void cmd_train(const TrainArgs& a) {
  TrainConfig cfg = desk_config();
  if (!a.config.empty()) cfg = config_from_json(read_text(a.config), cfg);
  if (a.iters_opt->count() > 0) cfg.total_iters = a.iters;
  if (a.epsilon_opt->count() > 0) cfg.epsilon = a.epsilon;
  if (a.seed_opt->count() > 0) cfg.seed = a.seed;
  if (a.batch_opt->count() > 0) cfg.batch_rays = a.batch;
  if (a.ablation_opt->count() > 0) cfg.ablation = parse_ablation(a.ablation);
  if (a.threads_opt->count() > 0) cfg.render_threads = a.threads;
  const Dataset ds = load_blender_dataset(a.data);
  const fs::path out = a.out;
  fs::create_directories(out);
  Checkpoint ck = init_checkpoint(cfg, ds);
  log(LogLevel::info, "training " + std::to_string(cfg.total_iters) + " iterations, ablation " +
                          ablation_name(cfg.ablation));
  const int every = std::max(1, cfg.total_iters / 20);
  TrainHooks hooks;
  hooks.on_record = [&](const TrainRecord& r) {
    if (r.iter % every == 0 || !std::isnan(r.val_psnr)) {
      std::ostringstream os;
      os << "iter " << r.iter << " loss " << r.loss << " fine_mse " << r.fine_mse << " depth " << r.depth;
      if (!std::isnan(r.val_psnr)) os << " val_psnr " << r.val_psnr << " val_psnr_full " << r.val_psnr_full;
      log(LogLevel::info, os.str());
    }
  };
  std::vector<GrowthEvent> events;
  hooks.on_growth = [&](const GrowthEvent& e) {
    log(e.result.grown ? LogLevel::info : LogLevel::warn,
        "growth at iter " + std::to_string(e.iter) + " (" + e.tree + " stage " + std::to_string(e.stage_index) +
            ", " + std::to_string(e.uncertain_points) + " uncertain points): " + e.result.status);
  };
  hooks.checkpoint_every = std::max(1, cfg.total_iters / 10);
  hooks.on_checkpoint = [&](const Checkpoint& c) { save_checkpoint(c, out / "checkpoint.bin"); };
  const TrainResult res = train(ck, ds, hooks);
  save_checkpoint(ck, out / "checkpoint.bin");
  write_text(out / "metrics.csv", trail_csv(res.trail));
  json growth = json::array();
  for (const GrowthEvent& e : res.growth_events) {
    growth.push_back({{"iter", e.iter}, {"tree", e.tree}, {"stage_index", e.stage_index},
                      {"uncertain_points", e.uncertain_points}, {"grown", e.result.grown},
                      {"status", e.result.status}, {"inertia", e.result.inertia}});
  }
  Manifest m;
  m.command = "train";
  m.config = json::parse(config_to_json(ck.config));
  m.seed = ck.config.seed;
  m.outputs = {"checkpoint.bin", "metrics.csv"};
  m.extra["ablation"] = ablation_name(ck.config.ablation);
  m.extra["data"] = a.data;
  m.extra["stages"] = tree_depth(ck.model.fine_root);
  m.extra["params"] = count_params(ck.model);
  m.extra["growth_events"] = growth;
  m.write(out);
  log(LogLevel::info, "checkpoint with " + std::to_string(tree_depth(ck.model.fine_root)) + " stages written to " +
                          (out / "checkpoint.bin").string());
}

struct RenderArgs {
  std::string checkpoint;
  std::string data;
  std::string out;
  std::string split = "test";
  int view = 0;
  std::string mode = "early-exit";
  double epsilon = 0.0;
  int threads = 1;
  CLI::Option* epsilon_opt = nullptr;
};

void cmd_render(const RenderArgs& a) {
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const Dataset ds = load_blender_dataset(a.data);
  const auto idx = split_views(ds, a.split);
  if (a.view < 0 || static_cast<std::size_t>(a.view) >= idx.size()) {
    throw CLI::ValidationError("--view", "index out of range for split " + a.split);
  }
  const double eps = a.epsilon_opt->count() > 0 ? a.epsilon : apply_ablation(ck.config).inference_epsilon;
  const RenderOptions opt = options_from(ck, a.mode, eps, a.threads);
  const CameraPose& pose = ds.poses[idx[static_cast<std::size_t>(a.view)]];
  const RenderOutput r = render_image(ck.model, pose, opt);
  const fs::path out = a.out;
  fs::create_directories(out);
  Manifest m;
  m.command = "render";
  m.config = {{"checkpoint", a.checkpoint}, {"data", a.data}, {"split", a.split}, {"view", a.view},
              {"mode", a.mode}, {"epsilon", eps}, {"threads", a.threads}};
  m.seed = ck.config.seed;
  png_write(out / "render.png", r.image);
  m.outputs.push_back("render.png");
  const int depth = tree_depth(ck.model.fine_root);
  png_write(out / "exit_map.png", exit_map_image(r.exit_map, pose.width, pose.height, depth));
  std::ostringstream legend;
  legend << "stage,r,g,b\n";
  for (int d = 1; d <= depth; ++d) {
    const Eigen::Vector3d c = stage_color(d);
    legend << d << ',' << std::lround(c.x() * 255) << ',' << std::lround(c.y() * 255) << ','
           << std::lround(c.z() * 255) << '\n';
  }
  write_text(out / "exit_map_legend.csv", legend.str());
  m.outputs.push_back("exit_map.png");
  m.outputs.push_back("exit_map_legend.csv");
  for (std::size_t d = 0; d < r.stage_images.size(); ++d) {
    const std::string name = "stage_" + std::to_string(d + 1) + ".png";
    png_write(out / name, r.stage_images[d]);
    m.outputs.push_back(name);
  }
  const FlopsReport rep = flops_report(r, cumulative_layers(ck.model.fine_root),
                                       static_cast<std::int64_t>(pose.width) * pose.height);
  write_text(out / "flops.csv", flops_report_csv(rep));
  m.outputs.push_back("flops.csv");
  m.write(out);
  std::cout << flops_report_table(rep);
}

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::string out;
  std::string split = "test";
  double epsilon = 0.0;
  std::string mode = "early-exit";
  int threads = 1;
  CLI::Option* epsilon_opt = nullptr;
};

void cmd_eval(const EvalArgs& a) {
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const Dataset ds = load_blender_dataset(a.data);
  const auto idx = split_views(ds, a.split);
  const double eps = a.epsilon_opt->count() > 0 ? a.epsilon : apply_ablation(ck.config).inference_epsilon;
  const RenderOptions opt = options_from(ck, a.mode == "per-stage" ? "early-exit" : a.mode, eps, a.threads);
  const std::vector<int> layers = cumulative_layers(ck.model.fine_root);
  const std::size_t depth = layers.size();
  std::ostringstream csv;
  csv << std::setprecision(10) << "view,psnr,ssim,mean_flops_per_pixel,mean_layers_per_sample";
  for (std::size_t d = 1; d <= depth; ++d) csv << ",exit_" << d;
  csv << '\n';
  double sum_psnr = 0, sum_ssim = 0, sum_flops = 0, sum_layers = 0;
  std::vector<double> sum_frac(depth, 0.0);
  for (std::size_t v = 0; v < idx.size(); ++v) {
    const CameraPose& pose = ds.poses[idx[v]];
    const RenderOutput r = render_image(ck.model, pose, opt);
    const FlopsReport rep = flops_report(r, layers, static_cast<std::int64_t>(pose.width) * pose.height);
    const double p = psnr(r.image, ds.images[idx[v]]);
    const double s = ssim(r.image, ds.images[idx[v]]);
    csv << v << ',' << p << ',' << s << ',' << rep.mean_flops_per_pixel << ',' << rep.mean_layers_per_sample;
    for (std::size_t d = 0; d < depth; ++d) {
      const double f = d < rep.per_exit_fraction.size() ? rep.per_exit_fraction[d] : 0.0;
      csv << ',' << f;
      sum_frac[d] += f;
    }
    csv << '\n';
    sum_psnr += p;
    sum_ssim += s;
    sum_flops += rep.mean_flops_per_pixel;
    sum_layers += rep.mean_layers_per_sample;
    log(LogLevel::debug, "view " + std::to_string(v) + " psnr " + std::to_string(p));
  }
  const double n = static_cast<double>(idx.size());
  csv << "mean," << sum_psnr / n << ',' << sum_ssim / n << ',' << sum_flops / n << ',' << sum_layers / n;
  for (double f : sum_frac) csv << ',' << f / n;
  csv << '\n';
  const fs::path out = a.out;
  fs::create_directories(out);
  write_text(out / "eval.csv", csv.str());
  Manifest m;
  m.command = "eval";
  m.config = {{"checkpoint", a.checkpoint}, {"data", a.data}, {"split", a.split}, {"mode", a.mode},
              {"epsilon", eps}, {"threads", a.threads}};
  m.seed = ck.config.seed;
  m.outputs = {"eval.csv"};
  m.write(out);
  std::cout << std::fixed << std::setprecision(3) << "views: " << idx.size() << "\nPSNR: " << sum_psnr / n
            << "\nSSIM: " << sum_ssim / n << "\nmean FLOPs/pixel: " << std::setprecision(1) << sum_flops / n
            << "\nmean layers/sample: " << std::setprecision(3) << sum_layers / n << "\nexit distribution:";
  for (std::size_t d = 0; d < depth; ++d) std::cout << ' ' << d + 1 << ':' << 100.0 * sum_frac[d] / n << '%';
  std::cout << '\n';
}

struct SweepArgs {
  std::string scene = "cornell-mini";
  std::string out;
  std::string config;
  std::vector<int> depths{2, 4};
  std::vector<int> widths{16, 64};
  std::vector<int> resolutions{16, 32, 64};
  std::vector<std::uint64_t> seeds{0};
  int iters = 2000;
  int views = 20;
  std::uint64_t seed = 0;
};

void cmd_sweep(const SweepArgs& a) {
  SweepConfig sw;
  sw.depths = a.depths;
  sw.widths = a.widths;
  sw.resolutions = a.resolutions;
  sw.seeds = a.seeds;
  sw.views = a.views;
  sw.base = desk_config();
  if (!a.config.empty()) sw.base = config_from_json(read_text(a.config), sw.base);
  sw.base.total_iters = a.iters;
  sw.base.seed = a.seed;
  const SceneSpec spec = resolve_scene(a.scene);
  const auto rows = capacity_sweep(spec, sw, [](const SweepRow& r) {
    log(LogLevel::info, "depth " + std::to_string(r.depth) + " width " + std::to_string(r.width) + " res " +
                            std::to_string(r.resolution) + " seed " + std::to_string(r.seed) + ": psnr " +
                            std::to_string(r.psnr));
  });
  const fs::path out = a.out;
  fs::create_directories(out);
  write_text(out / "sweep.csv", sweep_csv(rows));
  std::ostringstream runs;
  runs << std::setprecision(10) << "depth,width,resolution,seed,psnr\n";
  for (const SweepRow& r : rows)
    runs << r.depth << ',' << r.width << ',' << r.resolution << ',' << r.seed << ',' << r.psnr << '\n';
  write_text(out / "sweep_runs.csv", runs.str());
  Manifest m;
  m.command = "sweep";
  m.config = {{"scene", a.scene}, {"depths", a.depths}, {"widths", a.widths}, {"resolutions", a.resolutions},
              {"seeds", a.seeds}, {"iters", a.iters}, {"views", a.views},
              {"base", json::parse(config_to_json(sw.base))}};
  m.seed = a.seed;
  m.outputs = {"sweep.csv", "sweep_runs.csv"};
  m.write(out);
  std::cout << sweep_csv(rows);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Recursive radiance fields with early exit"};
  app.require_subcommand(1);

  MakeSceneArgs ms;
  auto* make_scene = app.add_subcommand("make-scene", "Render a synthetic scene into a blender-format dataset");
  make_scene->add_option("--scene", ms.scene, "Builtin scene name or scene JSON path")->capture_default_str();
  make_scene->add_option("--out", ms.out, "Dataset directory")->required();
  make_scene->add_option("--views", ms.views, "Number of views")->check(CLI::Range(2, 100000))->capture_default_str();
  make_scene->add_option("--resolution", ms.resolution, "Image side in pixels")->check(CLI::PositiveNumber)->capture_default_str();
  make_scene->add_option("--seed", ms.seed, "Random seed")->capture_default_str();

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train a recursive field on a dataset");
  train_cmd->add_option("--data", tr.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  train_cmd->add_option("--out", tr.out, "Run directory")->required();
  train_cmd->add_option("--config", tr.config, "JSON config file")->check(CLI::ExistingFile);
  tr.iters_opt = train_cmd->add_option("--iters", tr.iters, "Total iterations")->check(CLI::NonNegativeNumber);
  tr.epsilon_opt = train_cmd->add_option("--epsilon", tr.epsilon, "Exit threshold")->check(CLI::NonNegativeNumber);
  tr.seed_opt = train_cmd->add_option("--seed", tr.seed, "Random seed");
  tr.batch_opt = train_cmd->add_option("--batch", tr.batch, "Rays per batch")->check(CLI::PositiveNumber);
  tr.threads_opt = train_cmd->add_option("--threads", tr.threads, "Threads for validation renders")->check(CLI::PositiveNumber);
  tr.ablation_opt = train_cmd->add_option("--ablation", tr.ablation, "Ablation mode")
                        ->check(CLI::IsMember({"none", "no-early-termination", "no-branch", "random-division"}));

  RenderArgs rd;
  auto* render_cmd = app.add_subcommand("render", "Render one dataset view from a checkpoint");
  render_cmd->add_option("--checkpoint", rd.checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  render_cmd->add_option("--data", rd.data, "Dataset directory for poses")->required()->check(CLI::ExistingDirectory);
  render_cmd->add_option("--out", rd.out, "Output directory")->required();
  render_cmd->add_option("--split", rd.split, "train, test or val")->capture_default_str();
  render_cmd->add_option("--view", rd.view, "View index within the split")->capture_default_str();
  render_cmd->add_option("--mode", rd.mode, "Exit mode")
      ->check(CLI::IsMember({"early-exit", "full-depth", "per-stage"}))
      ->capture_default_str();
  rd.epsilon_opt = render_cmd->add_option("--epsilon", rd.epsilon, "Exit threshold")->check(CLI::NonNegativeNumber);
  render_cmd->add_option("--threads", rd.threads, "Render threads")->check(CLI::PositiveNumber)->capture_default_str();
  render_cmd->add_flag("--per-stage", [&rd](std::int64_t) { rd.mode = "per-stage"; }, "Same as --mode per-stage");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Score a checkpoint on a dataset split");
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--data", ev.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  eval_cmd->add_option("--out", ev.out, "Output directory")->required();
  eval_cmd->add_option("--split", ev.split, "train, test or val")->capture_default_str();
  eval_cmd->add_option("--mode", ev.mode, "Exit mode")
      ->check(CLI::IsMember({"early-exit", "full-depth", "per-stage"}))
      ->capture_default_str();
  ev.epsilon_opt = eval_cmd->add_option("--epsilon", ev.epsilon, "Exit threshold")->check(CLI::NonNegativeNumber);
  eval_cmd->add_option("--threads", ev.threads, "Render threads")->check(CLI::PositiveNumber)->capture_default_str();

  SweepArgs sp;
  auto* sweep_cmd = app.add_subcommand("sweep", "Capacity versus scene complexity grid");
  sweep_cmd->add_option("--scene", sp.scene, "Builtin scene name or scene JSON path")->capture_default_str();
  sweep_cmd->add_option("--out", sp.out, "Output directory")->required();
  sweep_cmd->add_option("--config", sp.config, "JSON config file for the base settings")->check(CLI::ExistingFile);
  sweep_cmd->add_option("--depths", sp.depths, "Layer counts")->delimiter(',')->capture_default_str();
  sweep_cmd->add_option("--widths", sp.widths, "Latent widths")->delimiter(',')->capture_default_str();
  sweep_cmd->add_option("--resolutions", sp.resolutions, "Image sides")->delimiter(',')->capture_default_str();
  sweep_cmd->add_option("--seeds", sp.seeds, "Model seeds")->delimiter(',')->capture_default_str();
  sweep_cmd->add_option("--iters", sp.iters, "Iterations per cell")->check(CLI::NonNegativeNumber)->capture_default_str();
  sweep_cmd->add_option("--views", sp.views, "Views per dataset")->check(CLI::Range(2, 100000))->capture_default_str();
  sweep_cmd->add_option("--seed", sp.seed, "Dataset seed")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (make_scene->parsed()) cmd_make_scene(ms);
    if (train_cmd->parsed()) cmd_train(tr);
    if (render_cmd->parsed()) cmd_render(rd);
    if (eval_cmd->parsed()) cmd_eval(ev);
    if (sweep_cmd->parsed()) cmd_sweep(sp);
  } catch (const CLI::ValidationError& e) {
    log(LogLevel::error, e.what());
    return 1;
  } catch (const std::exception& e) {
    log(LogLevel::error, e.what());
    return 2;
  }
  return 0;
}
