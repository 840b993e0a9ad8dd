#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>

#include <json.hpp>

#include "mtunet/datapipe.hpp"
#include "mtunet/model.hpp"
#include "mtunet/train.hpp"

namespace mtunet {

namespace fs = std::filesystem;

/// Default binarisation threshold on probabilities. A logit threshold of 0
/// is the same cut as p > 0.5.
inline constexpr double kDefaultTau = 0.5;

struct SynthOptions {
  fs::path out;
  std::size_t count = 16;
  std::size_t size = 64;
  std::uint64_t seed = 0;
  std::string split = "train";
  TargetSpec targets;
  NoiseSpec noise;
};

struct AugmentOptions {
  fs::path manifest;
  fs::path out;
  std::uint64_t seed = 0;
  CrrpConfig crrp;
  bool classic = false;
  AugmentConfig classic_config;
};

struct TileOptions {
  fs::path manifest;
  fs::path out;
  std::size_t tile_size = 64;
};

struct TrainOptions {
  fs::path manifest;
  fs::path out;
  ModelConfig model;
  TrainConfig train;
};

struct PredictOptions {
  fs::path checkpoint;
  fs::path manifest;
  fs::path out;
  bool raw = false;
  std::size_t jobs = 1;
};

struct ThresholdOptions {
  double tau = kDefaultTau;
  bool adaptive = false;
};

struct ClusterOptions {
  fs::path pred_dir;
  fs::path out;
  ThresholdOptions threshold;
};

struct EvalOptions {
  fs::path gt_dir;
  fs::path pred_dir;
  fs::path out;
  ThresholdOptions threshold;
  double d_thresh = kDefaultCentroidThreshold;
};

struct RocOptions {
  fs::path gt_dir;
  fs::path pred_dir;
  fs::path out;
  std::size_t points = 101;
  double d_thresh = kDefaultCentroidThreshold;
};

nlohmann::json to_json(const SynthOptions& o);
nlohmann::json to_json(const AugmentOptions& o);
nlohmann::json to_json(const TileOptions& o);
nlohmann::json to_json(const TrainOptions& o);
nlohmann::json to_json(const PredictOptions& o);
nlohmann::json to_json(const ClusterOptions& o);
nlohmann::json to_json(const EvalOptions& o);
nlohmann::json to_json(const RocOptions& o);

/// Each command echoes its resolved options to <out>/config.json.
void run_synth(const SynthOptions& o);
void run_augment(const AugmentOptions& o);
void run_tile(const TileOptions& o);
TrainResult run_train(const TrainOptions& o, const StepCallback& on_step = {});
void run_predict(const PredictOptions& o);
void run_cluster(const ClusterOptions& o);
DetectionReport run_eval(const EvalOptions& o);
RocCurve run_roc(const RocOptions& o);

/// Probability map for `id` in `dir`: <id>.f32 when present, else <id>.png.
Raster<double> load_prediction(const fs::path& dir, const std::string& id);
/// Ground-truth ids: stems of the PNG files in `dir`, sorted.
std::vector<std::string> list_ids(const fs::path& dir);
BinaryMask binarize(const Raster<double>& probability, const ThresholdOptions& options);

/// Writes through a temporary file and renames it into place.
void write_text_atomic(const fs::path& path, const std::string& text);

/// Runs `body(i)` for i in [0, n) on up to `jobs` threads; rethrows the
/// first exception.
void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& body);

/// Parses argv, runs the subcommand and maps errors to exit codes
/// (0 ok, 2 config, 3 data, 4 numeric). Failures print a JSON object with
/// "error" and "message" to `err`.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace mtunet
