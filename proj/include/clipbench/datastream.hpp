#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <vector>

#include "clipbench/models.hpp"
#include "clipbench/types.hpp"

namespace clipbench::datastream {

struct ShiftEvent {
  int day = 0;
  double severity = 0.0;  // features scale by (1 + severity) from this day on
};

struct StreamConfig {
  int feature_dim = 32;
  int num_days = 10;  // last day is held out for evaluation
  int examples_per_day = 4096;
  int mixture_components = 4;
  double drift_rate = 0.0;  // rotation angle per day, radians
  std::vector<ShiftEvent> shift_events;
  int window_days = 3;
  int batch_size = 256;
  double label_noise = 0.5;  // relative to each task's teacher logit spread
  std::uint64_t seed = 0;
};

struct DayData {
  int day = 0;
  Matrix features;             // examples_per_day x feature_dim
  std::vector<Array> labels;   // one per task
  std::vector<int> component;  // mixture component each example came from
};

struct Batch {
  Matrix features;
  std::vector<Array> labels;
  std::vector<std::int64_t> ids;  // day * examples_per_day + index
  int day_stamp = 0;
};

// Frozen random one-hidden-layer tanh net whose outputs define the labels.
class TeacherNet {
 public:
  TeacherNet(int input_dim, int num_tasks, std::uint64_t seed);
  Matrix logits(const Matrix& features) const;  // B x num_tasks

 private:
  Matrix w1_;
  Matrix w2_;
};

// Teacher plus the per-task calibration that turns its logits into labels:
// binary tasks threshold noisy logits at the task's calibration median,
// regression tasks emit the noisy logit directly.
class Labeler {
 public:
  Labeler(const StreamConfig& cfg, std::vector<models::TaskHead> tasks);

  const std::vector<models::TaskHead>& tasks() const { return tasks_; }
  std::vector<Array> label(const Matrix& features, std::uint64_t seed) const;

  double threshold(int task) const { return thresholds_[task]; }
  double noise_std(int task) const { return noise_std_[task]; }

 private:
  TeacherNet teacher_;
  std::vector<models::TaskHead> tasks_;
  Vector thresholds_;
  Vector noise_std_;
};

// Rotation applied to the mixture means after d days of drift: consecutive
// coordinate pairs (0,1), (2,3), ... each turn by drift_rate * d.
Matrix rotate_pairs(const Matrix& points, double angle);

// Cumulative feature scale at a given day from the shift events.
double scale_at(const StreamConfig& cfg, int day);

// One day of the stream. Deterministic in (cfg.seed, day).
DayData gen_day(const StreamConfig& cfg, int day, const Labeler& labeler);

class Stream {
 public:
  Stream(StreamConfig cfg, std::vector<models::TaskHead> tasks);

  const StreamConfig& config() const { return cfg_; }
  const Labeler& labeler() const { return labeler_; }
  int train_days() const { return cfg_.num_days - 1; }
  const DayData& day(int d) const { return days_.at(static_cast<std::size_t>(d)); }
  const DayData& holdout() const { return days_.back(); }

  // Mixture means in effect on a given day, components x feature_dim.
  Matrix mixture_means(int day) const;

 private:
  StreamConfig cfg_;
  Labeler labeler_;
  Matrix base_means_;
  std::vector<DayData> days_;
};

// Samples batches with replacement from the trailing window of train days.
// The active day advances every steps_per_day calls and never leaves the
// training range.
class WindowSampler {
 public:
  WindowSampler(const Stream& stream, std::int64_t steps_per_day,
                std::uint64_t seed);

  Batch next();
  int current_day() const;
  std::int64_t steps_taken() const { return steps_; }

 private:
  const Stream* stream_;
  std::int64_t steps_per_day_;
  std::int64_t steps_ = 0;
  std::mt19937_64 rng_;
};

// Binary feature dump: magic "SSTREAM1", then feature_dim / num_days /
// examples_per_day as little-endian int64, then rows of little-endian
// doubles ordered by day then example index. Labels are not persisted.
void dump_features(const Stream& stream, const std::filesystem::path& path);

struct LoadedFeatures {
  std::int64_t feature_dim = 0;
  std::int64_t num_days = 0;
  std::int64_t examples_per_day = 0;
  std::vector<Matrix> days;
};

LoadedFeatures load_features(const std::filesystem::path& path);

}  // namespace clipbench::datastream
