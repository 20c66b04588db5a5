#include "recurf/trainer.hpp"

#include "recurf/cluster.hpp"
#include "recurf/metrics.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>

namespace recurf {

using nlohmann::json;

Ablation parse_ablation(const std::string& tag) {
  std::string t = tag;
  std::replace(t.begin(), t.end(), '-', '_');
  if (t == "none") return Ablation::none;
  if (t == "no_early_termination") return Ablation::no_early_termination;
  if (t == "no_branch") return Ablation::no_branch;
  if (t == "random_division") return Ablation::random_division;
  throw std::invalid_argument("unknown ablation '" + tag +
                              "' (expected none, no-early-termination, no-branch, random-division)");
}

std::string ablation_name(Ablation a) {
  switch (a) {
    case Ablation::none: return "none";
    case Ablation::no_early_termination: return "no-early-termination";
    case Ablation::no_branch: return "no-branch";
    case Ablation::random_division: return "random-division";
  }
  return "none";
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("train config: " + msg); };
  if (total_iters < 0) fail("total_iters must be >= 0");
  if (batch_rays < 1) fail("batch_rays must be >= 1");
  if (n_coarse < 2) fail("n_coarse must be >= 2");
  if (n_fine < 0) fail("n_fine must be >= 0");
  if (!(lr > 0.0)) fail("lr must be positive");
  if (!(epsilon >= 0.0)) fail("epsilon must be >= 0");
  if (stage_depths.empty()) fail("stage_depths must not be empty");
  for (int d : stage_depths)
    if (d < 1) fail("every stage depth must be >= 1");
  if (k_per_growth.size() != stage_depths.size() - 1 || growth_fractions.size() != stage_depths.size() - 1) {
    fail("k_per_growth and growth_fractions need one entry per growth (stage_depths size - 1)");
  }
  for (int k : k_per_growth)
    if (k < 2 || k > 4) fail("k_per_growth entries must be in [2, 4]");
  for (std::size_t i = 0; i < growth_fractions.size(); ++i) {
    const double f = growth_fractions[i];
    if (!(f > 0.0 && f < 1.0)) fail("growth_fractions must lie in (0, 1)");
    if (i > 0 && !(f > growth_fractions[i - 1])) fail("growth_fractions must be strictly increasing");
  }
  if (field.width < 1 || field.color_hidden < 1) fail("field widths must be positive");
  if (field.encoding.pos_frequencies < 0 || field.encoding.dir_frequencies < 0) fail("frequency counts must be >= 0");
  if (growth_grid < 1) fail("growth_grid must be >= 1");
  if (validation_every < 0.0 || validation_every > 1.0) fail("validation_every must lie in [0, 1]");
}

TrainConfig desk_config() {
  TrainConfig c;
  c.batch_rays = 32;
  c.n_coarse = 32;
  c.n_fine = 64;
  c.field.width = 64;
  c.field.color_hidden = 32;
  c.field.encoding.pos_frequencies = 6;
  return c;
}

Schedule apply_ablation(const TrainConfig& config) {
  Schedule s;
  s.k_per_growth = config.k_per_growth;
  s.inference_epsilon = config.epsilon;
  switch (config.ablation) {
    case Ablation::none:
      break;
    case Ablation::no_early_termination:
      s.inference_epsilon = 0.0;
      break;
    case Ablation::no_branch:
      std::fill(s.k_per_growth.begin(), s.k_per_growth.end(), 1);
      break;
    case Ablation::random_division:
      s.division = Division::random;
      break;
  }
  return s;
}

double learning_rate(const TrainConfig& config, int iter) {
  const double knee = config.lr_decay_fraction * config.total_iters;
  if (config.lr_schedule == LrSchedule::exponential) {
    if (knee <= 0.0) return config.lr * config.lr_decay_factor;
    return config.lr * std::pow(config.lr_decay_factor, iter / knee);
  }
  return iter < knee ? config.lr : config.lr * config.lr_decay_factor;
}

int growth_iteration(const TrainConfig& config, std::size_t g) {
  return static_cast<int>(std::floor(config.growth_fractions.at(g) * config.total_iters));
}

namespace {

json vec3_json(const Eigen::Vector3d& v) { return json::array({v.x(), v.y(), v.z()}); }
Eigen::Vector3d vec3_from(const json& j) { return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()}; }

template <typename T>
void read_opt(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

std::string config_to_json(const TrainConfig& c) {
  json j;
  j["total_iters"] = c.total_iters;
  j["batch_rays"] = c.batch_rays;
  j["n_coarse"] = c.n_coarse;
  j["n_fine"] = c.n_fine;
  j["lr"] = c.lr;
  j["lr_schedule"] = c.lr_schedule == LrSchedule::step ? "step" : "exponential";
  j["lr_decay_factor"] = c.lr_decay_factor;
  j["lr_decay_fraction"] = c.lr_decay_fraction;
  j["stage_depths"] = c.stage_depths;
  j["k_per_growth"] = c.k_per_growth;
  j["growth_fractions"] = c.growth_fractions;
  j["epsilon"] = c.epsilon;
  j["weights"] = {{"alpha1", c.weights.alpha1}, {"alpha2", c.weights.alpha2},
                  {"beta1", c.weights.beta1}, {"beta2", c.weights.beta2}};
  j["seed"] = c.seed;
  j["ablation"] = ablation_name(c.ablation);
  j["width"] = c.field.width;
  j["color_hidden"] = c.field.color_hidden;
  j["pos_frequencies"] = c.field.encoding.pos_frequencies;
  j["dir_frequencies"] = c.field.encoding.dir_frequencies;
  j["include_raw"] = c.field.encoding.include_raw;
  j["reinject_position"] = c.field.reinject_position;
  j["bounds"] = {{"min", vec3_json(c.field.bounds.lo)}, {"max", vec3_json(c.field.bounds.hi)}};
  j["growth_grid"] = c.growth_grid;
  j["growth_cap"] = c.growth_cap;
  j["perturb"] = c.perturb;
  j["validation_every"] = c.validation_every;
  j["validation_views"] = c.validation_views;
  j["render_threads"] = c.render_threads;
  return j.dump();
}

TrainConfig config_from_json(const std::string& text, const TrainConfig& base) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(std::string("config: malformed JSON (") + e.what() + ")");
  }
  if (!j.is_object()) throw std::invalid_argument("config: expected a JSON object");
  static const char* const known[] = {
      "total_iters", "batch_rays", "n_coarse", "n_fine", "lr", "lr_schedule", "lr_decay_factor",
      "lr_decay_fraction", "stage_depths", "k_per_growth", "growth_fractions", "epsilon", "weights",
      "seed", "ablation", "width", "color_hidden", "pos_frequencies", "dir_frequencies", "include_raw",
      "reinject_position", "bounds", "growth_grid", "growth_cap", "perturb", "validation_every",
      "validation_views", "render_threads"};
  for (const auto& item : j.items()) {
    if (std::find_if(std::begin(known), std::end(known), [&](const char* k) { return item.key() == k; }) ==
        std::end(known)) {
      throw std::invalid_argument("config: unknown key '" + item.key() + "'");
    }
  }
  TrainConfig c = base;
  try {
    read_opt(j, "total_iters", c.total_iters);
    read_opt(j, "batch_rays", c.batch_rays);
    read_opt(j, "n_coarse", c.n_coarse);
    read_opt(j, "n_fine", c.n_fine);
    read_opt(j, "lr", c.lr);
    if (j.contains("lr_schedule")) {
      const std::string s = j.at("lr_schedule").get<std::string>();
      if (s == "step") {
        c.lr_schedule = LrSchedule::step;
      } else if (s == "exponential") {
        c.lr_schedule = LrSchedule::exponential;
      } else {
        throw std::invalid_argument("config: lr_schedule must be \"step\" or \"exponential\"");
      }
    }
    read_opt(j, "lr_decay_factor", c.lr_decay_factor);
    read_opt(j, "lr_decay_fraction", c.lr_decay_fraction);
    read_opt(j, "stage_depths", c.stage_depths);
    read_opt(j, "k_per_growth", c.k_per_growth);
    read_opt(j, "growth_fractions", c.growth_fractions);
    read_opt(j, "epsilon", c.epsilon);
    if (j.contains("weights")) {
      const json& w = j.at("weights");
      read_opt(w, "alpha1", c.weights.alpha1);
      read_opt(w, "alpha2", c.weights.alpha2);
      read_opt(w, "beta1", c.weights.beta1);
      read_opt(w, "beta2", c.weights.beta2);
    }
    read_opt(j, "seed", c.seed);
    if (j.contains("ablation")) c.ablation = parse_ablation(j.at("ablation").get<std::string>());
    read_opt(j, "width", c.field.width);
    read_opt(j, "color_hidden", c.field.color_hidden);
    read_opt(j, "pos_frequencies", c.field.encoding.pos_frequencies);
    read_opt(j, "dir_frequencies", c.field.encoding.dir_frequencies);
    read_opt(j, "include_raw", c.field.encoding.include_raw);
    read_opt(j, "reinject_position", c.field.reinject_position);
    if (j.contains("bounds")) {
      c.field.bounds = Aabb{vec3_from(j.at("bounds").at("min")), vec3_from(j.at("bounds").at("max"))};
    }
    read_opt(j, "growth_grid", c.growth_grid);
    read_opt(j, "growth_cap", c.growth_cap);
    read_opt(j, "perturb", c.perturb);
    read_opt(j, "validation_every", c.validation_every);
    read_opt(j, "validation_views", c.validation_views);
    read_opt(j, "render_threads", c.render_threads);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("config: wrong value type (") + e.what() + ")");
  }
  return c;
}

std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

Checkpoint init_checkpoint(const TrainConfig& config, const Dataset& dataset) {
  config.validate();
  Checkpoint ck;
  ck.config = config;
  ck.config.field.bounds = dataset.bounds;
  ck.model = make_model(ck.config.field, ck.config.stage_depths.front(), ck.config.epsilon, ck.config.seed);
  ck.rng.seed(ck.config.seed ^ 0x5851f42d4c957f2dULL);
  return ck;
}

// -- Checkpoint encoding -----------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'R', 'E', 'C', 'U', 'R', 'F', 'C', 'K'};

class Writer {
 public:
  template <typename T>
  void pod(const T& v) {
    static_assert(std::is_trivially_copyable_v<T>);
    buf_.append(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void str(const std::string& s) {
    pod<std::uint64_t>(s.size());
    buf_.append(s);
  }
  void matrix(const Eigen::MatrixXd& m) {
    pod<std::int64_t>(m.rows());
    pod<std::int64_t>(m.cols());
    buf_.append(reinterpret_cast<const char*>(m.data()), static_cast<std::size_t>(m.size()) * sizeof(double));
  }
  std::string& bytes() { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  explicit Reader(const std::string& b) : buf_(b) {}
  template <typename T>
  T pod() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string str() {
    const auto n = pod<std::uint64_t>();
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  Eigen::MatrixXd matrix() {
    const auto r = pod<std::int64_t>();
    const auto c = pod<std::int64_t>();
    if (r < 0 || c < 0 || (r > 0 && c > (1LL << 40) / r)) throw std::runtime_error("checkpoint: corrupt matrix header");
    const auto bytes = static_cast<std::size_t>(r * c) * sizeof(double);
    need(bytes);
    Eigen::MatrixXd m(r, c);
    std::memcpy(m.data(), buf_.data() + pos_, bytes);
    pos_ += bytes;
    return m;
  }
  [[nodiscard]] std::size_t pos() const { return pos_; }
  [[nodiscard]] bool done() const { return pos_ == buf_.size(); }

 private:
  void need(std::size_t n) const {
    if (buf_.size() - pos_ < n) throw std::runtime_error("checkpoint: truncated payload");
  }
  const std::string& buf_;
  std::size_t pos_ = 0;
};

void write_param(Writer& w, const Parameter& p) {
  w.str(p.name);
  w.matrix(p.value);
  w.pod<std::int64_t>(p.adam.t);
  w.matrix(p.adam.m);
  w.matrix(p.adam.v);
}

void read_param(Reader& r, Parameter& p) {
  p.name = r.str();
  p.value = r.matrix();
  p.adam.t = r.pod<std::int64_t>();
  p.adam.m = r.matrix();
  p.adam.v = r.matrix();
  p.zero_grad();
}

void write_linear(Writer& w, const Linear& l) {
  write_param(w, l.weight);
  write_param(w, l.bias);
}

Linear read_linear(Reader& r) {
  Linear l;
  read_param(r, l.weight);
  read_param(r, l.bias);
  if (l.bias.value.rows() != l.weight.value.rows() || l.bias.value.cols() != 1) {
    throw std::runtime_error("checkpoint: bias shape does not match " + l.weight.name);
  }
  return l;
}

void write_stage(Writer& w, const StageNode& s) {
  w.pod<std::int32_t>(s.stage_index);
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(s.mlp.size()));
  for (const Linear& l : s.mlp) write_linear(w, l);
  write_linear(w, s.uncertainty);
  write_linear(w, s.out.alpha);
  write_linear(w, s.out.feature);
  write_linear(w, s.out.color_hidden);
  write_linear(w, s.out.color_out);
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(s.children.size()));
  for (const auto& c : s.centers) {
    w.pod(c.x());
    w.pod(c.y());
    w.pod(c.z());
  }
  for (const StageNode& c : s.children) write_stage(w, c);
}

StageNode read_stage(Reader& r, int depth) {
  if (depth > 16) throw std::runtime_error("checkpoint: stage tree too deep");
  StageNode s;
  s.stage_index = r.pod<std::int32_t>();
  const auto n_mlp = r.pod<std::uint32_t>();
  if (n_mlp > 64) throw std::runtime_error("checkpoint: implausible layer count");
  for (std::uint32_t i = 0; i < n_mlp; ++i) s.mlp.push_back(read_linear(r));
  s.uncertainty = read_linear(r);
  s.out.alpha = read_linear(r);
  s.out.feature = read_linear(r);
  s.out.color_hidden = read_linear(r);
  s.out.color_out = read_linear(r);
  const auto n_children = r.pod<std::uint32_t>();
  if (n_children > 4) throw std::runtime_error("checkpoint: implausible child count");
  for (std::uint32_t i = 0; i < n_children; ++i) {
    const double x = r.pod<double>(), y = r.pod<double>(), z = r.pod<double>();
    s.centers.emplace_back(x, y, z);
  }
  for (std::uint32_t i = 0; i < n_children; ++i) s.children.push_back(read_stage(r, depth + 1));
  return s;
}

}  // namespace

std::string serialize_checkpoint(const Checkpoint& ck) {
  Writer w;
  w.bytes().append(kMagic, sizeof(kMagic));
  w.pod<std::uint32_t>(ck.version);
  const std::string cfg = config_to_json(ck.config);
  w.str(cfg);
  w.pod<std::uint64_t>(fnv1a(cfg));
  w.pod<std::int64_t>(ck.iteration);
  w.pod<std::int32_t>(ck.growths);
  std::ostringstream rng;
  rng << ck.rng;
  w.str(rng.str());
  w.pod(ck.model.epsilon);
  write_stage(w, ck.model.coarse_root);
  write_stage(w, ck.model.fine_root);
  const std::uint64_t sum = fnv1a(w.bytes());
  w.pod(sum);
  return std::move(w.bytes());
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < sizeof(kMagic) + 4 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error("checkpoint: not a recurf checkpoint (bad magic)");
  }
  Reader r(bytes);
  for (std::size_t i = 0; i < sizeof(kMagic); ++i) r.pod<char>();
  Checkpoint ck;
  ck.version = r.pod<std::uint32_t>();
  if (ck.version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint: version " + std::to_string(ck.version) + " found, version " +
                             std::to_string(kCheckpointVersion) + " expected");
  }
  if (bytes.size() < sizeof(std::uint64_t) ||
      fnv1a(bytes.substr(0, bytes.size() - sizeof(std::uint64_t))) !=
          [&] {
            std::uint64_t s;
            std::memcpy(&s, bytes.data() + bytes.size() - sizeof(s), sizeof(s));
            return s;
          }()) {
    throw std::runtime_error("checkpoint: checksum mismatch (corrupt or truncated file)");
  }
  const std::string cfg = r.str();
  if (r.pod<std::uint64_t>() != fnv1a(cfg)) throw std::runtime_error("checkpoint: config digest mismatch");
  ck.config = config_from_json(cfg);
  ck.iteration = static_cast<int>(r.pod<std::int64_t>());
  ck.growths = r.pod<std::int32_t>();
  std::istringstream rng(r.str());
  rng >> ck.rng;
  if (!rng) throw std::runtime_error("checkpoint: corrupt rng state");
  ck.model.config = ck.config.field;
  ck.model.epsilon = r.pod<double>();
  ck.model.coarse_root = read_stage(r, 1);
  ck.model.fine_root = read_stage(r, 1);
  r.pod<std::uint64_t>();
  if (!r.done()) throw std::runtime_error("checkpoint: trailing bytes after payload");
  return ck;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const std::string bytes = serialize_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return deserialize_checkpoint(ss.str());
  } catch (const std::exception& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

std::string trail_csv(const std::vector<TrainRecord>& trail) {
  std::ostringstream os;
  os << std::setprecision(10);
  os << "iter,lr,loss,coarse_mse,fine_mse,fine_l_se,fine_l_0,depth,val_psnr,val_psnr_full\n";
  for (const TrainRecord& r : trail) {
    os << r.iter << ',' << r.lr << ',' << r.loss << ',' << r.coarse_mse << ',' << r.fine_mse << ','
       << r.fine_l_se << ',' << r.fine_l_0 << ',' << r.depth << ',';
    if (!std::isnan(r.val_psnr)) os << r.val_psnr;
    os << ',';
    if (!std::isnan(r.val_psnr_full)) os << r.val_psnr_full;
    os << '\n';
  }
  return os.str();
}

// -- Training -----------------------------------------------------------------------

namespace {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (1 + a) + 0xbf58476d1ce4e5b9ULL * (1 + b) +
                    0x94d049bb133111ebULL * (1 + c);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

struct RayPool {
  std::vector<Ray> rays;
  std::vector<Eigen::Vector3d> colors;
};

RayPool ray_pool(const Dataset& ds, const Aabb& bounds) {
  RayPool pool;
  std::vector<std::size_t> idx = ds.indices(Split::train);
  if (idx.empty()) throw std::invalid_argument("train: dataset has no training views");
  for (std::size_t i : idx) {
    const CameraPose& pose = ds.poses[i];
    const Image& img = ds.images[i];
    const auto rays = camera_rays(pose, all_pixels(pose.width, pose.height), bounds);
    for (std::size_t p = 0; p < rays.size(); ++p) {
      pool.rays.push_back(rays[p]);
      pool.colors.emplace_back(img.data[p * 3], img.data[p * 3 + 1], img.data[p * 3 + 2]);
    }
  }
  return pool;
}

void collect_params(StageNode& root, std::vector<Parameter*>& out) {
  for_each_stage(root, [&out](StageNode& s) {
    auto add = [&out](Linear& l) {
      out.push_back(&l.weight);
      out.push_back(&l.bias);
    };
    for (Linear& l : s.mlp) add(l);
    add(s.uncertainty);
    add(s.out.alpha);
    add(s.out.feature);
    add(s.out.color_hidden);
    add(s.out.color_out);
  });
}

struct BatchSamples {
  Tensor t;          // [R x S]
  Tensor positions;  // [R*S x 3]
  Tensor directions;
};

BatchSamples build_samples(const std::vector<const Ray*>& rays, const std::vector<std::vector<double>>& ts) {
  BatchSamples b;
  const auto R = static_cast<Eigen::Index>(rays.size());
  const auto S = static_cast<Eigen::Index>(ts.front().size());
  b.t.resize(R, S);
  b.positions.resize(R * S, 3);
  b.directions.resize(R * S, 3);
  for (Eigen::Index r = 0; r < R; ++r) {
    for (Eigen::Index i = 0; i < S; ++i) {
      const double t = ts[static_cast<std::size_t>(r)][static_cast<std::size_t>(i)];
      b.t(r, i) = t;
      b.positions.row(r * S + i) = rays[static_cast<std::size_t>(r)]->at(t).transpose();
      b.directions.row(r * S + i) = rays[static_cast<std::size_t>(r)]->direction.transpose();
    }
  }
  return b;
}

}  // namespace

RenderOptions render_options_for(const TrainConfig& config, double epsilon) {
  RenderOptions o;
  o.epsilon = epsilon;
  o.mode = RenderMode::early_exit;
  o.n_coarse = config.n_coarse;
  o.n_fine = config.n_fine;
  o.threads = config.render_threads;
  return o;
}

double validation_psnr(const ModelTree& model, const Dataset& dataset, const RenderOptions& options, int views) {
  std::vector<std::size_t> idx = dataset.indices(Split::test);
  if (idx.empty()) idx = dataset.indices(Split::train);
  if (idx.empty()) throw std::invalid_argument("validation_psnr: dataset is empty");
  const std::size_t n = std::min(idx.size(), static_cast<std::size_t>(std::max(1, views)));
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    acc += psnr(render_image(model, dataset.poses[idx[i]], options).image, dataset.images[idx[i]]);
  }
  return acc / static_cast<double>(n);
}

std::vector<GrowthEvent> grow_model(Checkpoint& ck, std::size_t g,
                                    const std::vector<Eigen::Vector3d>& extra_candidates) {
  const TrainConfig& cfg = ck.config;
  const Schedule sched = apply_ablation(cfg);
  std::vector<Eigen::Vector3d> candidates = grid_points(cfg.field.bounds, cfg.growth_grid);
  candidates.insert(candidates.end(), extra_candidates.begin(), extra_candidates.end());
  std::vector<GrowthEvent> events;
  StageNode* roots[2] = {&ck.model.coarse_root, &ck.model.fine_root};
  for (int tree = 0; tree < 2; ++tree) {
    StageNode& root = *roots[tree];
    std::vector<StageNode*> targets;
    for (StageNode* leaf : leaves(root))
      if (leaf->stage_index == static_cast<int>(g) + 1) targets.push_back(leaf);
    for (std::size_t li = 0; li < targets.size(); ++li) {
      StageNode& leaf = *targets[li];
      const std::uint64_t seed = mix_seed(cfg.seed, g, static_cast<std::uint64_t>(tree), li);
      const auto pts = sample_uncertain_points(root, leaf, cfg.field, candidates, cfg.epsilon, cfg.growth_cap, seed);
      GrowthEvent ev;
      ev.iter = ck.iteration;
      ev.tree = tree == 0 ? "coarse" : "fine";
      ev.stage_index = leaf.stage_index;
      ev.uncertain_points = pts.size();
      ev.result = grow(leaf, pts, sched.k_per_growth.at(g), cfg.stage_depths.at(g + 1), seed, cfg.field,
                       sched.division);
      events.push_back(std::move(ev));
    }
  }
  ck.growths = static_cast<int>(g) + 1;
  return events;
}

TrainResult train(Checkpoint& ck, const Dataset& dataset, const TrainHooks& hooks) {
  const TrainConfig& cfg = ck.config;
  cfg.validate();
  TrainResult result;
  if (ck.iteration >= cfg.total_iters) return result;
  const Schedule sched = apply_ablation(cfg);
  const RayPool pool = ray_pool(dataset, cfg.field.bounds);
  const std::size_t n_growths = cfg.growth_fractions.size();
  const int val_every = cfg.validation_every > 0.0
                            ? std::max(1, static_cast<int>(std::lround(cfg.validation_every * cfg.total_iters)))
                            : 0;
  std::vector<Eigen::Vector3d> recent;
  std::uniform_int_distribution<std::size_t> pick(0, pool.rays.size() - 1);
  const int R = cfg.batch_rays;

  for (; ck.iteration < cfg.total_iters; ++ck.iteration) {
    const int it = ck.iteration;
    while (static_cast<std::size_t>(ck.growths) < n_growths &&
           growth_iteration(cfg, static_cast<std::size_t>(ck.growths)) <= it) {
      auto events = grow_model(ck, static_cast<std::size_t>(ck.growths), recent);
      for (auto& ev : events) {
        if (hooks.on_growth) hooks.on_growth(ev);
        result.growth_events.push_back(std::move(ev));
      }
    }

    std::vector<const Ray*> rays(static_cast<std::size_t>(R));
    Tensor truth(R, 3);
    for (int r = 0; r < R; ++r) {
      const std::size_t k = pick(ck.rng);
      rays[static_cast<std::size_t>(r)] = &pool.rays[k];
      truth.row(r) = pool.colors[k].transpose();
    }
    std::mt19937_64* jitter = cfg.perturb ? &ck.rng : nullptr;
    std::vector<std::vector<double>> tc(static_cast<std::size_t>(R));
    for (int r = 0; r < R; ++r) tc[static_cast<std::size_t>(r)] = stratified_samples(*rays[static_cast<std::size_t>(r)], cfg.n_coarse, jitter);

    std::vector<LevelLossVars> parts;
    Tape tape;
    const BatchSamples cs = build_samples(rays, tc);
    const AllExitsBatch coarse =
        forward_all_exits(tape, ck.model.coarse_root, cfg.field, encode_batch(cfg.field, cs.positions, cs.directions));
    Tensor coarse_w;
    for (const LevelOutputs& lv : coarse.levels) {
      Var rgb = composite_rays(lv.sigma, lv.rgb, cs.t, true, &coarse_w);
      parts.push_back(level_loss(rgb, lv.delta, truth, cfg.n_coarse));
    }
    const std::size_t coarse_levels = coarse.levels.size();

    std::vector<std::vector<double>> tf(static_cast<std::size_t>(R));
    for (int r = 0; r < R; ++r) {
      const auto ri = static_cast<std::size_t>(r);
      std::vector<double> w(coarse_w.row(r).data(), coarse_w.row(r).data() + coarse_w.cols());
      tf[ri] = merge_samples(tc[ri], hierarchical_samples(*rays[ri], tc[ri], w, cfg.n_fine, jitter));
    }
    const BatchSamples fs = build_samples(rays, tf);
    const int s_fine = static_cast<int>(fs.t.cols());
    const AllExitsBatch fine =
        forward_all_exits(tape, ck.model.fine_root, cfg.field, encode_batch(cfg.field, fs.positions, fs.directions));
    for (const LevelOutputs& lv : fine.levels) {
      Var rgb = composite_rays(lv.sigma, lv.rgb, fs.t, true);
      parts.push_back(level_loss(rgb, lv.delta, truth, s_fine));
    }

    LossBreakdown breakdown;
    Var loss;
    try {
      loss = combine_levels(parts, cfg.weights, &breakdown);
    } catch (const std::runtime_error& e) {
      throw std::runtime_error("training diverged at iteration " + std::to_string(it) + ": " + e.what());
    }
    if (!std::isfinite(breakdown.total)) {
      throw std::runtime_error("training diverged at iteration " + std::to_string(it) + ": non-finite loss");
    }
    std::vector<Parameter*> params;
    collect_params(ck.model.coarse_root, params);
    collect_params(ck.model.fine_root, params);
    for (Parameter* p : params) p->zero_grad();
    tape.backward(loss);
    const double lr = learning_rate(cfg, it);
    try {
      for (Parameter* p : params) adam_step(*p, lr);
    } catch (const std::runtime_error& e) {
      throw std::runtime_error("training diverged at iteration " + std::to_string(it) + ": " + e.what());
    }

    recent.clear();
    for (Eigen::Index i = 0; i < fs.positions.rows(); ++i) recent.emplace_back(fs.positions.row(i).transpose());

    TrainRecord rec;
    rec.iter = it;
    rec.lr = lr;
    rec.loss = breakdown.total;
    rec.coarse_mse = breakdown.mse[coarse_levels - 1] / R;
    rec.fine_mse = breakdown.mse.back() / R;
    rec.fine_l_se = breakdown.l_se.back();
    rec.fine_l_0 = breakdown.l_0.back();
    rec.depth = static_cast<int>(fine.levels.size());
    rec.val_psnr = std::numeric_limits<double>::quiet_NaN();
    rec.val_psnr_full = std::numeric_limits<double>::quiet_NaN();
    if (val_every > 0 && (it + 1) % val_every == 0 && cfg.validation_views > 0) {
      rec.val_psnr = validation_psnr(ck.model, dataset, render_options_for(cfg, sched.inference_epsilon),
                                     cfg.validation_views);
      rec.val_psnr_full = validation_psnr(ck.model, dataset, render_options_for(cfg, 0.0), cfg.validation_views);
    }
    if (hooks.on_record) hooks.on_record(rec);
    result.trail.push_back(rec);
    if (hooks.on_checkpoint && hooks.checkpoint_every > 0 && (it + 1) % hooks.checkpoint_every == 0 &&
        it + 1 < cfg.total_iters) {
      ck.iteration = it + 1;
      hooks.on_checkpoint(ck);
      ck.iteration = it;
    }
  }
  return result;
}

// -- Capacity sweep ---------------------------------------------------------------

std::vector<SweepRow> capacity_sweep(const SceneSpec& scene, const SweepConfig& sweep,
                                     const std::function<void(const SweepRow&)>& on_row) {
  std::vector<SweepRow> rows;
  std::map<int, Dataset> datasets;
  for (int res : sweep.resolutions) datasets.emplace(res, make_dataset(scene, sweep.views, res, sweep.base.seed));
  for (int depth : sweep.depths) {
    for (int width : sweep.widths) {
      for (int res : sweep.resolutions) {
        for (std::uint64_t seed : sweep.seeds) {
          TrainConfig cfg = sweep.base;
          cfg.stage_depths = {depth};
          cfg.k_per_growth.clear();
          cfg.growth_fractions.clear();
          cfg.field.width = width;
          cfg.field.color_hidden = std::max(4, width / 2);
          cfg.seed = seed;
          cfg.validation_every = 0.0;
          const Dataset& ds = datasets.at(res);
          Checkpoint ck = init_checkpoint(cfg, ds);
          train(ck, ds);
          RenderOptions opt = render_options_for(cfg, 0.0);
          opt.mode = RenderMode::full_depth;
          SweepRow row{depth, width, res, seed,
                       validation_psnr(ck.model, ds, opt, static_cast<int>(ds.indices(Split::test).size()))};
          if (on_row) on_row(row);
          rows.push_back(row);
        }
      }
    }
  }
  return rows;
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::ostringstream os;
  os << std::setprecision(10) << "depth,width,resolution,psnr\n";
  std::vector<std::tuple<int, int, int>> order;
  std::map<std::tuple<int, int, int>, std::pair<double, int>> acc;
  for (const SweepRow& r : rows) {
    const auto key = std::make_tuple(r.depth, r.width, r.resolution);
    if (!acc.count(key)) order.push_back(key);
    acc[key].first += r.psnr;
    acc[key].second += 1;
  }
  for (const auto& key : order) {
    const auto& [sum, n] = acc.at(key);
    os << std::get<0>(key) << ',' << std::get<1>(key) << ',' << std::get<2>(key) << ',' << sum / n << '\n';
  }
  return os.str();
}

}  // namespace recurf
