#include "mtunet/commands.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <atomic>
#include <exception>
#include <fstream>
#include <mutex>
#include <ostream>
#include <sstream>
#include <thread>

#include "mtunet/checkpoint.hpp"
#include "mtunet/image_io.hpp"
#include "mtunet/metrics.hpp"
#include "mtunet/postprocess.hpp"

namespace mtunet {

using nlohmann::json;

namespace {

template <typename T>
T get(const json& j, const std::string& key) {
  try {
    return j.get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("option '" + key + "': " + e.what());
  }
}

[[noreturn]] void unknown_key(const char* scope, const std::string& key) {
  throw ConfigError(std::string(scope) + ": unknown key '" + key + "'");
}

void require_object(const json& j, const char* scope) {
  if (!j.is_object()) throw ConfigError(std::string(scope) + " must be a JSON object");
}

json targets_json(const TargetSpec& t) {
  return {{"min_count", t.min_count},         {"max_count", t.max_count}, {"min_sigma", t.min_sigma},
          {"max_sigma", t.max_sigma},         {"max_elongation", t.max_elongation},
          {"min_snr", t.min_snr},             {"max_snr", t.max_snr},     {"mask_level", t.mask_level},
          {"min_separation", t.min_separation}, {"border", t.border}};
}

TargetSpec targets_from(const json& j) {
  require_object(j, "targets");
  TargetSpec t;
  for (const auto& [k, v] : j.items()) {
    if (k == "min_count") t.min_count = get<std::size_t>(v, k);
    else if (k == "max_count") t.max_count = get<std::size_t>(v, k);
    else if (k == "min_sigma") t.min_sigma = get<double>(v, k);
    else if (k == "max_sigma") t.max_sigma = get<double>(v, k);
    else if (k == "max_elongation") t.max_elongation = get<double>(v, k);
    else if (k == "min_snr") t.min_snr = get<double>(v, k);
    else if (k == "max_snr") t.max_snr = get<double>(v, k);
    else if (k == "mask_level") t.mask_level = get<double>(v, k);
    else if (k == "min_separation") t.min_separation = get<std::size_t>(v, k);
    else if (k == "border") t.border = get<std::size_t>(v, k);
    else unknown_key("targets", k);
  }
  return t;
}

json noise_json(const NoiseSpec& n) {
  return {{"background", n.background},
          {"noise_sigma", n.noise_sigma},
          {"clutter_amplitude", n.clutter_amplitude},
          {"clutter_scale", n.clutter_scale},
          {"clutter_bumps", n.clutter_bumps}};
}

NoiseSpec noise_from(const json& j) {
  require_object(j, "noise");
  NoiseSpec n;
  for (const auto& [k, v] : j.items()) {
    if (k == "background") n.background = get<double>(v, k);
    else if (k == "noise_sigma") n.noise_sigma = get<double>(v, k);
    else if (k == "clutter_amplitude") n.clutter_amplitude = get<double>(v, k);
    else if (k == "clutter_scale") n.clutter_scale = get<double>(v, k);
    else if (k == "clutter_bumps") n.clutter_bumps = get<std::size_t>(v, k);
    else unknown_key("noise", k);
  }
  return n;
}

json crrp_json(const CrrpConfig& c) {
  return {{"paste_count", c.paste_count}, {"scale_min", c.scale_min},           {"scale_max", c.scale_max},
          {"angles", c.angles},           {"margin", c.margin},                 {"min_separation", c.min_separation},
          {"max_retries", c.max_retries}};
}

CrrpConfig crrp_from(const json& j) {
  require_object(j, "crrp");
  CrrpConfig c;
  for (const auto& [k, v] : j.items()) {
    if (k == "paste_count") c.paste_count = get<std::size_t>(v, k);
    else if (k == "scale_min") c.scale_min = get<double>(v, k);
    else if (k == "scale_max") c.scale_max = get<double>(v, k);
    else if (k == "angles") c.angles = get<std::vector<int>>(v, k);
    else if (k == "margin") c.margin = get<std::size_t>(v, k);
    else if (k == "min_separation") c.min_separation = get<std::size_t>(v, k);
    else if (k == "max_retries") c.max_retries = get<std::size_t>(v, k);
    else unknown_key("crrp", k);
  }
  c.validate();
  return c;
}

json threshold_json(const ThresholdOptions& t) { return {{"tau", t.tau}, {"adaptive_tau", t.adaptive}}; }

bool threshold_key(ThresholdOptions& t, const std::string& k, const json& v) {
  if (k == "tau") t.tau = get<double>(v, k);
  else if (k == "adaptive_tau") t.adaptive = get<bool>(v, k);
  else return false;
  return true;
}

void validate_tau(const ThresholdOptions& t) {
  if (!(t.tau >= 0.0 && t.tau <= 1.0)) throw ConfigError("tau must be in [0, 1]");
}

fs::path path_from(const json& v, const std::string& key) { return fs::path(get<std::string>(v, key)); }

void require_path(const fs::path& p, const char* flag) {
  if (p.empty()) throw ConfigError(std::string(flag) + " is required");
}

void echo_config(const fs::path& out, const json& resolved) {
  fs::create_directories(out);
  write_text_atomic(out / "config.json", resolved.dump(2) + "\n");
}

std::string csv_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

SynthOptions synth_from(const json& j) {
  SynthOptions o;
  for (const auto& [k, v] : j.items()) {
    if (k == "out") o.out = path_from(v, k);
    else if (k == "count") o.count = get<std::size_t>(v, k);
    else if (k == "size") o.size = get<std::size_t>(v, k);
    else if (k == "seed") o.seed = get<std::uint64_t>(v, k);
    else if (k == "split") o.split = get<std::string>(v, k);
    else if (k == "targets") o.targets = targets_from(v);
    else if (k == "noise") o.noise = noise_from(v);
    else unknown_key("synth", k);
  }
  return o;
}

AugmentOptions augment_from(const json& j) {
  AugmentOptions o;
  for (const auto& [k, v] : j.items()) {
    if (k == "manifest") o.manifest = path_from(v, k);
    else if (k == "out") o.out = path_from(v, k);
    else if (k == "seed") o.seed = get<std::uint64_t>(v, k);
    else if (k == "crrp") o.crrp = crrp_from(v);
    else if (k == "classic") o.classic = get<bool>(v, k);
    else if (k == "flip_probability") o.classic_config.flip_probability = get<double>(v, k);
    else if (k == "blur_sigma") o.classic_config.blur_sigma = get<double>(v, k);
    else unknown_key("augment", k);
  }
  return o;
}

TileOptions tile_from(const json& j) {
  TileOptions o;
  for (const auto& [k, v] : j.items()) {
    if (k == "manifest") o.manifest = path_from(v, k);
    else if (k == "out") o.out = path_from(v, k);
    else if (k == "tile_size") o.tile_size = get<std::size_t>(v, k);
    else unknown_key("tile", k);
  }
  return o;
}

TrainOptions train_from(const json& j) {
  TrainOptions o;
  for (const auto& [k, v] : j.items()) {
    if (k == "manifest") o.manifest = path_from(v, k);
    else if (k == "out") o.out = path_from(v, k);
    else if (k == "model") o.model = ModelConfig::from_json(v);
    else if (k == "train") o.train = TrainConfig::from_json(v);
    else unknown_key("train", k);
  }
  return o;
}

PredictOptions predict_from(const json& j) {
  PredictOptions o;
  for (const auto& [k, v] : j.items()) {
    if (k == "checkpoint") o.checkpoint = path_from(v, k);
    else if (k == "manifest") o.manifest = path_from(v, k);
    else if (k == "out") o.out = path_from(v, k);
    else if (k == "raw") o.raw = get<bool>(v, k);
    else if (k == "jobs") o.jobs = get<std::size_t>(v, k);
    else unknown_key("predict", k);
  }
  return o;
}

ClusterOptions cluster_from(const json& j) {
  ClusterOptions o;
  for (const auto& [k, v] : j.items()) {
    if (k == "pred_dir") o.pred_dir = path_from(v, k);
    else if (k == "out") o.out = path_from(v, k);
    else if (!threshold_key(o.threshold, k, v)) unknown_key("cluster", k);
  }
  return o;
}

EvalOptions eval_from(const json& j) {
  EvalOptions o;
  for (const auto& [k, v] : j.items()) {
    if (k == "gt_dir") o.gt_dir = path_from(v, k);
    else if (k == "pred_dir") o.pred_dir = path_from(v, k);
    else if (k == "out") o.out = path_from(v, k);
    else if (k == "d_thresh") o.d_thresh = get<double>(v, k);
    else if (!threshold_key(o.threshold, k, v)) unknown_key("eval", k);
  }
  return o;
}

RocOptions roc_from(const json& j) {
  RocOptions o;
  for (const auto& [k, v] : j.items()) {
    if (k == "gt_dir") o.gt_dir = path_from(v, k);
    else if (k == "pred_dir") o.pred_dir = path_from(v, k);
    else if (k == "out") o.out = path_from(v, k);
    else if (k == "points") o.points = get<std::size_t>(v, k);
    else if (k == "d_thresh") o.d_thresh = get<double>(v, k);
    else unknown_key("roc", k);
  }
  return o;
}

// Splits scenes larger than the model input into tiles with their masks.
std::vector<Scene> training_samples(const std::vector<Scene>& scenes, std::size_t size) {
  std::vector<Scene> out;
  for (const auto& s : scenes) {
    if (s.image.height == size && s.image.width == size) {
      out.push_back(s);
      continue;
    }
    const auto images = tile(s.image, size);
    const auto masks = tile(s.mask, size);
    for (std::size_t i = 0; i < images.tiles.size(); ++i) {
      Scene t;
      t.id = s.id + "_r" + std::to_string(images.tiles[i].row) + "_c" + std::to_string(images.tiles[i].col);
      t.bit_depth = s.bit_depth;
      t.image = images.tiles[i].raster;
      t.mask = masks.tiles[i].raster;
      out.push_back(std::move(t));
    }
  }
  return out;
}

std::vector<Scene> load_all(const fs::path& manifest) {
  std::vector<Scene> scenes;
  for (const auto& e : read_manifest(manifest)) scenes.push_back(load_scene(e));
  return scenes;
}

}  // namespace

json to_json(const SynthOptions& o) {
  return {{"out", o.out.generic_string()}, {"count", o.count},
          {"size", o.size},                {"seed", o.seed},
          {"split", o.split},              {"targets", targets_json(o.targets)},
          {"noise", noise_json(o.noise)}};
}

json to_json(const AugmentOptions& o) {
  return {{"manifest", o.manifest.generic_string()},
          {"out", o.out.generic_string()},
          {"seed", o.seed},
          {"crrp", crrp_json(o.crrp)},
          {"classic", o.classic},
          {"flip_probability", o.classic_config.flip_probability},
          {"blur_sigma", o.classic_config.blur_sigma}};
}

json to_json(const TileOptions& o) {
  return {{"manifest", o.manifest.generic_string()}, {"out", o.out.generic_string()}, {"tile_size", o.tile_size}};
}

json to_json(const TrainOptions& o) {
  return {{"manifest", o.manifest.generic_string()},
          {"out", o.out.generic_string()},
          {"model", o.model.to_json()},
          {"train", o.train.to_json()}};
}

json to_json(const PredictOptions& o) {
  return {{"checkpoint", o.checkpoint.generic_string()},
          {"manifest", o.manifest.generic_string()},
          {"out", o.out.generic_string()},
          {"raw", o.raw},
          {"jobs", o.jobs}};
}

json to_json(const ClusterOptions& o) {
  json j = threshold_json(o.threshold);
  j["pred_dir"] = o.pred_dir.generic_string();
  j["out"] = o.out.generic_string();
  return j;
}

json to_json(const EvalOptions& o) {
  json j = threshold_json(o.threshold);
  j["gt_dir"] = o.gt_dir.generic_string();
  j["pred_dir"] = o.pred_dir.generic_string();
  j["out"] = o.out.generic_string();
  j["d_thresh"] = o.d_thresh;
  return j;
}

json to_json(const RocOptions& o) {
  return {{"gt_dir", o.gt_dir.generic_string()},
          {"pred_dir", o.pred_dir.generic_string()},
          {"out", o.out.generic_string()},
          {"points", o.points},
          {"d_thresh", o.d_thresh}};
}

void write_text_atomic(const fs::path& path, const std::string& text) {
  const auto tmp = fs::path(path).concat(".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw DataError("cannot create " + tmp.string());
    out << text;
    if (!out) throw DataError("failed writing " + tmp.string());
  }
  fs::rename(tmp, path);
}

void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& body) {
  const std::size_t workers = std::max<std::size_t>(1, std::min(jobs, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> threads;
  for (std::size_t w = 0; w < workers; ++w) {
    threads.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          body(i);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
          next = n;
        }
      }
    });
  }
  for (auto& t : threads) t.join();
  if (failure) std::rethrow_exception(failure);
}

std::vector<std::string> list_ids(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError("not a directory: " + dir.string());
  std::vector<std::string> ids;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".png") ids.push_back(e.path().stem().string());
  }
  std::sort(ids.begin(), ids.end());
  return ids;
}

Raster<double> load_prediction(const fs::path& dir, const std::string& id) {
  const auto raw = dir / (id + ".f32");
  if (fs::exists(raw)) return read_probability_raw(raw);
  const auto png = dir / (id + ".png");
  if (!fs::exists(png)) throw DataError("no prediction for '" + id + "' in " + dir.string());
  return read_probability_png(png);
}

BinaryMask binarize(const Raster<double>& probability, const ThresholdOptions& options) {
  return threshold(probability, options.adaptive ? adaptive_threshold(probability) : options.tau);
}

void run_synth(const SynthOptions& o) {
  require_path(o.out, "--out");
  if (o.count == 0) throw ConfigError("synth: count must be positive");
  echo_config(o.out, to_json(o));
  std::vector<ManifestEntry> entries;
  for (const auto& s : synth_scenes(o.count, o.size, o.targets, o.noise, o.seed)) {
    entries.push_back(write_scene(o.out, s, o.split));
  }
  write_manifest(o.out / "manifest.json", entries);
}

void run_augment(const AugmentOptions& o) {
  require_path(o.manifest, "--manifest");
  require_path(o.out, "--out");
  o.crrp.validate();
  echo_config(o.out, to_json(o));
  json log = json::array();
  std::vector<ManifestEntry> entries;
  for (const auto& entry : read_manifest(o.manifest)) {
    Scene scene = load_scene(entry);
    const auto regions = cluster8(scene.mask);
    if (regions.empty()) {
      log.push_back({{"scene_id", scene.id}, {"success", false}, {"warning", "scene has no target regions"}});
    } else {
      auto result = crrp(scene, regions, o.crrp, derive_seed(o.seed, scene.id));
      for (const auto& rec : result.log) log.push_back(rec.to_json());
      scene = std::move(result.scene);
    }
    if (o.classic) scene = classic_augment(scene, o.classic_config, derive_seed(o.seed ^ 0x5bd1e995ULL, scene.id));
    entries.push_back(write_scene(o.out, scene, entry.split));
  }
  write_manifest(o.out / "manifest.json", entries);
  write_text_atomic(o.out / "paste_log.json", log.dump(2) + "\n");
}

void run_tile(const TileOptions& o) {
  require_path(o.manifest, "--manifest");
  require_path(o.out, "--out");
  if (o.tile_size < kMinTileSize) throw ConfigError("tile size must be >= 32");
  echo_config(o.out, to_json(o));
  json index = json::array();
  std::vector<ManifestEntry> entries;
  for (const auto& entry : read_manifest(o.manifest)) {
    const Scene scene = load_scene(entry);
    const auto images = tile(scene.image, o.tile_size);
    const auto masks = tile(scene.mask, o.tile_size);
    json tiles = json::array();
    for (std::size_t i = 0; i < images.tiles.size(); ++i) {
      const auto& t = images.tiles[i];
      Scene part;
      part.id = scene.id + "_r" + std::to_string(t.row) + "_c" + std::to_string(t.col);
      part.bit_depth = scene.bit_depth;
      part.image = t.raster;
      part.mask = masks.tiles[i].raster;
      entries.push_back(write_scene(o.out, part, entry.split));
      tiles.push_back({{"id", part.id},
                       {"row", t.row},
                       {"col", t.col},
                       {"pad_bottom", t.pad_bottom},
                       {"pad_right", t.pad_right}});
    }
    index.push_back({{"id", scene.id},
                     {"height", images.source_height},
                     {"width", images.source_width},
                     {"tile_size", images.tile_size},
                     {"tiles", tiles}});
  }
  write_manifest(o.out / "manifest.json", entries);
  write_text_atomic(o.out / "tiles.json", index.dump(2) + "\n");
}

TrainResult run_train(const TrainOptions& o, const StepCallback& on_step) {
  require_path(o.manifest, "--manifest");
  require_path(o.out, "--out");
  o.model.validate();
  o.train.validate();
  echo_config(o.out, to_json(o));
  const auto scenes = training_samples(load_all(o.manifest), o.model.input_size);
  Model model(o.model);
  auto result = train(model, scenes, o.train, on_step);
  save_checkpoint(o.out / "model.mtuw", model.to_checkpoint());
  std::ostringstream csv;
  write_history_csv(csv, result.history);
  write_text_atomic(o.out / "history.csv", csv.str());
  const auto report = evaluate_model(model, scenes);
  json summary{{"steps", o.train.steps},
               {"final_loss", result.history.back().loss},
               {"train_iou", report.iou},
               {"train_report", report.to_json()},
               {"parameters", model.parameter_count()}};
  write_text_atomic(o.out / "summary.json", summary.dump(2) + "\n");
  return result;
}

void run_predict(const PredictOptions& o) {
  require_path(o.checkpoint, "--checkpoint");
  require_path(o.manifest, "--manifest");
  require_path(o.out, "--out");
  if (o.jobs == 0) throw ConfigError("--jobs must be positive");
  echo_config(o.out, to_json(o));
  const Model model = Model::from_checkpoint(load_checkpoint(o.checkpoint));
  const auto entries = read_manifest(o.manifest);
  parallel_for(entries.size(), o.jobs, [&](std::size_t i) {
    const Scene scene = load_scene(entries[i]);
    const auto probability = predict_scene(model, scene);
    write_probability_png(o.out / (scene.id + ".png"), probability);
    if (o.raw) write_probability_raw(o.out / (scene.id + ".f32"), probability);
  });
}

void run_cluster(const ClusterOptions& o) {
  require_path(o.pred_dir, "--pred-dir");
  require_path(o.out, "--out");
  validate_tau(o.threshold);
  echo_config(o.out, to_json(o));
  for (const auto& id : list_ids(o.pred_dir)) {
    const auto probability = load_prediction(o.pred_dir, id);
    const double tau = o.threshold.adaptive ? adaptive_threshold(probability) : o.threshold.tau;
    json j{{"id", id}, {"tau", tau}, {"regions", regions_to_json(cluster8(threshold(probability, tau)))}};
    write_text_atomic(o.out / (id + ".json"), j.dump(2) + "\n");
  }
}

DetectionReport run_eval(const EvalOptions& o) {
  require_path(o.gt_dir, "--gt-dir");
  require_path(o.pred_dir, "--pred-dir");
  require_path(o.out, "--out");
  validate_tau(o.threshold);
  echo_config(o.out, to_json(o));
  DetectionCounts total;
  json per_image = json::array();
  for (const auto& id : list_ids(o.gt_dir)) {
    const BinaryMask gt = read_mask_png(o.gt_dir / (id + ".png"));
    const BinaryMask pred = binarize(load_prediction(o.pred_dir, id), o.threshold);
    require_same_size(gt, pred, "eval");
    const auto counts = count_detections(gt, pred, o.d_thresh);
    total += counts;
    per_image.push_back({{"id", id},
                         {"t_correct", counts.t_correct},
                         {"t_all", counts.t_all},
                         {"p_false", counts.p_false},
                         {"p_all", counts.p_all}});
  }
  const auto report = make_report(total, o.d_thresh);
  json j = report.to_json();
  j["images"] = per_image;
  write_text_atomic(o.out / "report.json", j.dump(2) + "\n");
  return report;
}

RocCurve run_roc(const RocOptions& o) {
  require_path(o.gt_dir, "--gt-dir");
  require_path(o.pred_dir, "--pred-dir");
  require_path(o.out, "--out");
  if (o.points < 2) throw ConfigError("roc: at least 2 thresholds are required");
  echo_config(o.out, to_json(o));
  std::vector<BinaryMask> gts;
  std::vector<Raster<double>> preds;
  for (const auto& id : list_ids(o.gt_dir)) {
    gts.push_back(read_mask_png(o.gt_dir / (id + ".png")));
    preds.push_back(load_prediction(o.pred_dir, id));
    require_same_size(gts.back(), preds.back(), "roc");
  }
  std::vector<ScoredScene> scored;
  for (std::size_t i = 0; i < gts.size(); ++i) scored.push_back({&preds[i], &gts[i]});
  const auto taus = default_tau_grid(o.points);
  const auto curve = roc_sweep(scored, taus, o.d_thresh);
  const auto write = [&](const char* name, auto&& fn) {
    std::ostringstream s;
    fn(s);
    write_text_atomic(o.out / name, s.str());
  };
  write("roc.csv", [&](std::ostream& s) { write_roc_csv(s, curve); });
  write("roc_fa_pd.csv", [&](std::ostream& s) { write_roc_projection(s, curve, "fa", "pd"); });
  write("roc_tau_pd.csv", [&](std::ostream& s) { write_roc_projection(s, curve, "tau", "pd"); });
  write("roc_tau_fa.csv", [&](std::ostream& s) { write_roc_projection(s, curve, "tau", "fa"); });
  return curve;
}

namespace {

// Flags land in an override object that is merged over the --config file.
struct Overrides {
  json values = json::object();
  std::vector<std::function<void()>> collectors;

  template <typename T>
  void bind(CLI::App* cmd, const std::string& flag, json::json_pointer key, const std::string& help) {
    auto slot = std::make_shared<std::optional<T>>();
    cmd->add_option(flag, *slot, help);
    collectors.push_back([this, slot, key] {
      if (*slot) values[key] = **slot;
    });
  }

  void flag(CLI::App* cmd, const std::string& name, json::json_pointer key, bool value, const std::string& help) {
    auto slot = std::make_shared<bool>(false);
    cmd->add_flag(name, *slot, help);
    collectors.push_back([this, slot, key, value] {
      if (*slot) values[key] = value;
    });
  }

  json resolve(const std::string& config_path) {
    for (auto& c : collectors) c();
    json merged = json::object();
    if (!config_path.empty()) {
      std::ifstream in(config_path);
      if (!in) throw ConfigError("cannot open config file " + config_path);
      try {
        in >> merged;
      } catch (const json::exception& e) {
        throw ConfigError("config file " + config_path + ": " + e.what());
      }
      if (!merged.is_object()) throw ConfigError("config file must hold a JSON object");
    }
    merged.merge_patch(values);
    return merged;
  }
};

int report_error(std::ostream& err, const char* kind, const std::string& message, int code) {
  err << json{{"error", kind}, {"message", message}, {"exit_code", code}}.dump() << '\n';
  return code;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Infrared tiny-ship detection pipeline"};
  app.require_subcommand(1);
  std::string config_path;
  Overrides ov;
  using ptr = json::json_pointer;

  auto common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "JSON file with option values; flags override it");
    ov.bind<std::string>(cmd, "--out", ptr("/out"), "Output directory");
  };

  auto* synth = app.add_subcommand("synth", "Generate synthetic scenes and a manifest");
  common(synth);
  ov.bind<std::uint64_t>(synth, "--seed", ptr("/seed"), "Global seed");
  ov.bind<std::size_t>(synth, "--count", ptr("/count"), "Number of scenes");
  ov.bind<std::size_t>(synth, "--size", ptr("/size"), "Scene edge in pixels");
  ov.bind<std::string>(synth, "--split", ptr("/split"), "Split label written to the manifest");

  auto* augment = app.add_subcommand("augment", "Copy-rotate-resize-paste augmentation");
  common(augment);
  ov.bind<std::uint64_t>(augment, "--seed", ptr("/seed"), "Global seed");
  ov.bind<std::string>(augment, "--manifest", ptr("/manifest"), "Input manifest");
  ov.bind<std::size_t>(augment, "--paste-count", ptr("/crrp/paste_count"), "Pastes per scene");
  ov.flag(augment, "--classic", ptr("/classic"), true, "Also apply random flips and blur");

  auto* tile_cmd = app.add_subcommand("tile", "Cut scenes into fixed-size tiles");
  common(tile_cmd);
  ov.bind<std::string>(tile_cmd, "--manifest", ptr("/manifest"), "Input manifest");
  ov.bind<std::size_t>(tile_cmd, "--tile-size", ptr("/tile_size"), "Tile edge in pixels (>= 32)");

  auto* train_cmd = app.add_subcommand("train", "Train a model on a manifest");
  common(train_cmd);
  ov.bind<std::string>(train_cmd, "--manifest", ptr("/manifest"), "Training manifest");
  ov.bind<std::uint64_t>(train_cmd, "--seed", ptr("/train/seed"), "Batch-order and augmentation seed");
  ov.bind<std::uint64_t>(train_cmd, "--init-seed", ptr("/model/seed"), "Weight initialisation seed");
  ov.bind<std::size_t>(train_cmd, "--steps", ptr("/train/steps"), "Optimizer steps");
  ov.bind<std::size_t>(train_cmd, "--batch-size", ptr("/train/batch_size"), "Samples per step");
  ov.bind<double>(train_cmd, "--lr", ptr("/train/learning_rate"), "Base learning rate");
  ov.bind<std::string>(train_cmd, "--loss", ptr("/train/loss"), "focal_iou, focal or soft_iou");
  ov.bind<double>(train_cmd, "--gamma", ptr("/train/gamma"), "Focal exponent");
  ov.bind<double>(train_cmd, "--smooth", ptr("/train/smooth"), "SoftIoU smoothing");
  ov.flag(train_cmd, "--no-mvtm", ptr("/model/use_mvtm"), false, "Drop the ViT branches");
  ov.flag(train_cmd, "--augment", ptr("/train/augment"), true, "Random flips and blur per sample");

  auto* predict = app.add_subcommand("predict", "Write probability maps for a manifest");
  common(predict);
  ov.bind<std::string>(predict, "--checkpoint", ptr("/checkpoint"), "Model checkpoint");
  ov.bind<std::string>(predict, "--manifest", ptr("/manifest"), "Scenes to predict");
  ov.bind<std::size_t>(predict, "--jobs", ptr("/jobs"), "Worker threads");
  ov.flag(predict, "--raw", ptr("/raw"), true, "Also write exact f32 maps");

  auto* cluster = app.add_subcommand("cluster", "Threshold and cluster probability maps");
  common(cluster);
  ov.bind<std::string>(cluster, "--pred-dir", ptr("/pred_dir"), "Directory of probability maps");
  ov.bind<double>(cluster, "--tau", ptr("/tau"), "Fixed probability threshold");
  ov.flag(cluster, "--adaptive-tau", ptr("/adaptive_tau"), true, "Per-map adaptive threshold");

  auto* eval = app.add_subcommand("eval", "Pd, Fa and IoU against ground-truth masks");
  common(eval);
  ov.bind<std::string>(eval, "--gt-dir", ptr("/gt_dir"), "Directory of ground-truth masks");
  ov.bind<std::string>(eval, "--pred-dir", ptr("/pred_dir"), "Directory of probability maps");
  ov.bind<double>(eval, "--tau", ptr("/tau"), "Fixed probability threshold");
  ov.flag(eval, "--adaptive-tau", ptr("/adaptive_tau"), true, "Per-map adaptive threshold");

  auto* roc = app.add_subcommand("roc", "Threshold sweep of Pd and Fa");
  common(roc);
  ov.bind<std::string>(roc, "--gt-dir", ptr("/gt_dir"), "Directory of ground-truth masks");
  ov.bind<std::string>(roc, "--pred-dir", ptr("/pred_dir"), "Directory of probability maps");
  ov.bind<std::size_t>(roc, "--points", ptr("/points"), "Number of thresholds");

  // Accepted everywhere for a uniform interface; only predict uses workers.
  for (auto* cmd : {synth, augment, tile_cmd, train_cmd, cluster, eval, roc}) {
    auto jobs = std::make_shared<std::size_t>(1);
    cmd->add_option("--jobs", *jobs, "Worker threads");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    return report_error(err, "config", e.what(), 2);
  }

  try {
    const json resolved = ov.resolve(config_path);
    if (*synth) run_synth(synth_from(resolved));
    else if (*augment) run_augment(augment_from(resolved));
    else if (*tile_cmd) run_tile(tile_from(resolved));
    else if (*train_cmd) {
      const auto result = run_train(train_from(resolved));
      out << "final loss " << csv_number(result.history.back().loss) << '\n';
    } else if (*predict) run_predict(predict_from(resolved));
    else if (*cluster) run_cluster(cluster_from(resolved));
    else if (*eval) out << run_eval(eval_from(resolved)).to_json().dump() << '\n';
    else if (*roc) run_roc(roc_from(resolved));
  } catch (const ConfigError& e) {
    return report_error(err, "config", e.what(), 2);
  } catch (const DataError& e) {
    return report_error(err, "data", e.what(), 3);
  } catch (const NumericError& e) {
    return report_error(err, "numeric", e.what(), 4);
  } catch (const fs::filesystem_error& e) {
    return report_error(err, "data", e.what(), 3);
  }
  return 0;
}

}  // namespace mtunet
