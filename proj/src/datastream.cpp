#include "clipbench/datastream.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <stdexcept>

static_assert(std::endian::native == std::endian::little,
              "feature dump assumes a little-endian host");

namespace clipbench::datastream {

namespace {

constexpr int kTeacherHidden = 32;
constexpr double kFeatureNoise = 0.6;
constexpr int kCalibrationSize = 2048;

Matrix gaussian_matrix(Index rows, Index cols, double std_dev,
                       std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std_dev);
  Matrix m(rows, cols);
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) m(i, j) = dist(rng);
  return m;
}

double median(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median of empty set");
  std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + mid, v.end());
  double hi = v[mid];
  if (v.size() % 2 == 1) return hi;
  double lo = *std::max_element(v.begin(), v.begin() + mid);
  return 0.5 * (lo + hi);
}

void validate(const StreamConfig& cfg) {
  if (cfg.feature_dim <= 0 || cfg.num_days < 2 || cfg.examples_per_day <= 0 ||
      cfg.mixture_components <= 0 || cfg.window_days <= 0 ||
      cfg.batch_size <= 0 || cfg.label_noise < 0.0)
    throw std::invalid_argument("invalid stream configuration");
  for (const auto& ev : cfg.shift_events)
    if (ev.severity < 0.0)
      throw std::invalid_argument("shift severity must be non-negative");
}

}  // namespace

TeacherNet::TeacherNet(int input_dim, int num_tasks, std::uint64_t seed) {
  std::mt19937_64 rng(mix64(seed, "teacher"));
  w1_ = gaussian_matrix(kTeacherHidden, input_dim,
                        1.0 / std::sqrt(static_cast<double>(input_dim)), rng);
  w2_ = gaussian_matrix(num_tasks, kTeacherHidden,
                        1.0 / std::sqrt(static_cast<double>(kTeacherHidden)),
                        rng);
}

Matrix TeacherNet::logits(const Matrix& features) const {
  Matrix h = (features * w1_.transpose()).array().tanh();
  return h * w2_.transpose();
}

Labeler::Labeler(const StreamConfig& cfg, std::vector<models::TaskHead> tasks)
    : teacher_(cfg.feature_dim, static_cast<int>(tasks.size()), cfg.seed),
      tasks_(std::move(tasks)) {
  // Calibrate thresholds and noise on a sample drawn from the day-0
  // distribution, so labels stay comparable as the stream drifts.
  std::mt19937_64 rng(mix64(cfg.seed, "calibration"));
  std::normal_distribution<double> noise(0.0, 1.0);
  std::uniform_int_distribution<int> comp(0, cfg.mixture_components - 1);
  std::mt19937_64 means_rng(mix64(cfg.seed, "means"));
  Matrix means = gaussian_matrix(cfg.mixture_components, cfg.feature_dim, 1.0,
                                 means_rng);
  Matrix sample(kCalibrationSize, cfg.feature_dim);
  for (Index i = 0; i < sample.rows(); ++i) {
    int k = comp(rng);
    for (Index j = 0; j < sample.cols(); ++j)
      sample(i, j) = means(k, j) + kFeatureNoise * noise(rng);
  }
  Matrix logits = teacher_.logits(sample);
  thresholds_.resize(static_cast<Index>(tasks_.size()));
  noise_std_.resize(static_cast<Index>(tasks_.size()));
  for (std::size_t t = 0; t < tasks_.size(); ++t) {
    Vector col = logits.col(static_cast<Index>(t));
    std::vector<double> vals(col.data(), col.data() + col.size());
    thresholds_[static_cast<Index>(t)] = median(std::move(vals));
    double mean = col.mean();
    double var = (col.array() - mean).square().mean();
    noise_std_[static_cast<Index>(t)] = cfg.label_noise * std::sqrt(var);
  }
}

std::vector<Array> Labeler::label(const Matrix& features,
                                  std::uint64_t seed) const {
  Matrix logits = teacher_.logits(features);
  std::mt19937_64 rng(mix64(seed, "labels"));
  std::normal_distribution<double> noise(0.0, 1.0);
  std::vector<Array> out(tasks_.size());
  for (std::size_t t = 0; t < tasks_.size(); ++t) {
    const Index ti = static_cast<Index>(t);
    Array y(features.rows());
    for (Index i = 0; i < features.rows(); ++i) {
      double z = logits(i, ti) + noise_std_[ti] * noise(rng);
      y[i] = tasks_[t].kind == models::TaskKind::Binary
                 ? (z > thresholds_[ti] ? 1.0 : 0.0)
                 : z;
    }
    out[t] = std::move(y);
  }
  return out;
}

Matrix rotate_pairs(const Matrix& points, double angle) {
  Matrix out = points;
  double c = std::cos(angle), s = std::sin(angle);
  for (Index j = 0; j + 1 < points.cols(); j += 2) {
    out.col(j) = c * points.col(j) - s * points.col(j + 1);
    out.col(j + 1) = s * points.col(j) + c * points.col(j + 1);
  }
  return out;
}

double scale_at(const StreamConfig& cfg, int day) {
  double scale = 1.0;
  for (const auto& ev : cfg.shift_events)
    if (ev.day <= day) scale *= 1.0 + ev.severity;
  return scale;
}

DayData gen_day(const StreamConfig& cfg, int day, const Labeler& labeler) {
  validate(cfg);
  std::mt19937_64 means_rng(mix64(cfg.seed, "means"));
  Matrix means = gaussian_matrix(cfg.mixture_components, cfg.feature_dim, 1.0,
                                 means_rng);
  Matrix day_means = rotate_pairs(means, cfg.drift_rate * day);
  double scale = scale_at(cfg, day);

  DayData data;
  data.day = day;
  data.features.resize(cfg.examples_per_day, cfg.feature_dim);
  std::uint64_t day_seed = mix64(cfg.seed, static_cast<std::uint64_t>(day));
  std::mt19937_64 rng(mix64(day_seed, "features"));
  std::normal_distribution<double> noise(0.0, 1.0);
  std::uniform_int_distribution<int> comp(0, cfg.mixture_components - 1);
  data.component.resize(static_cast<std::size_t>(cfg.examples_per_day));
  for (Index i = 0; i < data.features.rows(); ++i) {
    int k = comp(rng);
    data.component[static_cast<std::size_t>(i)] = k;
    for (Index j = 0; j < data.features.cols(); ++j)
      data.features(i, j) =
          scale * (day_means(k, j) + kFeatureNoise * noise(rng));
  }
  data.labels = labeler.label(data.features, day_seed);
  return data;
}

Stream::Stream(StreamConfig cfg, std::vector<models::TaskHead> tasks)
    : cfg_(std::move(cfg)), labeler_(cfg_, std::move(tasks)) {
  validate(cfg_);
  std::mt19937_64 means_rng(mix64(cfg_.seed, "means"));
  base_means_ = gaussian_matrix(cfg_.mixture_components, cfg_.feature_dim, 1.0,
                                means_rng);
  days_.reserve(static_cast<std::size_t>(cfg_.num_days));
  for (int d = 0; d < cfg_.num_days; ++d)
    days_.push_back(gen_day(cfg_, d, labeler_));
}

Matrix Stream::mixture_means(int day) const {
  return rotate_pairs(base_means_, cfg_.drift_rate * day);
}

WindowSampler::WindowSampler(const Stream& stream, std::int64_t steps_per_day,
                             std::uint64_t seed)
    : stream_(&stream),
      steps_per_day_(std::max<std::int64_t>(1, steps_per_day)),
      rng_(mix64(seed, "sampler")) {}

int WindowSampler::current_day() const {
  auto day = steps_ / steps_per_day_;
  auto last = static_cast<std::int64_t>(stream_->train_days()) - 1;
  return static_cast<int>(std::min(day, last));
}

Batch WindowSampler::next() {
  const StreamConfig& cfg = stream_->config();
  const int day = current_day();
  const int first = std::max(0, day - cfg.window_days + 1);
  const std::int64_t per_day = cfg.examples_per_day;
  const std::int64_t pool = static_cast<std::int64_t>(day - first + 1) * per_day;
  std::uniform_int_distribution<std::int64_t> pick(0, pool - 1);

  const std::size_t num_tasks = stream_->labeler().tasks().size();
  Batch batch;
  batch.day_stamp = day;
  batch.features.resize(cfg.batch_size, cfg.feature_dim);
  batch.labels.assign(num_tasks, Array(cfg.batch_size));
  batch.ids.resize(static_cast<std::size_t>(cfg.batch_size));
  for (int b = 0; b < cfg.batch_size; ++b) {
    std::int64_t idx = pick(rng_);
    int d = first + static_cast<int>(idx / per_day);
    Index row = static_cast<Index>(idx % per_day);
    const DayData& src = stream_->day(d);
    batch.features.row(b) = src.features.row(row);
    for (std::size_t t = 0; t < num_tasks; ++t)
      batch.labels[t][b] = src.labels[t][row];
    batch.ids[static_cast<std::size_t>(b)] =
        static_cast<std::int64_t>(d) * per_day + row;
  }
  ++steps_;
  return batch;
}

void dump_features(const Stream& stream, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string());
  const StreamConfig& cfg = stream.config();
  out.write("SSTREAM1", 8);
  auto write_i64 = [&](std::int64_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
  };
  write_i64(cfg.feature_dim);
  write_i64(cfg.num_days);
  write_i64(cfg.examples_per_day);
  for (int d = 0; d < cfg.num_days; ++d) {
    const Matrix& f = stream.day(d).features;
    for (Index i = 0; i < f.rows(); ++i)
      for (Index j = 0; j < f.cols(); ++j) {
        double v = f(i, j);
        out.write(reinterpret_cast<const char*>(&v), sizeof(v));
      }
  }
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

LoadedFeatures load_features(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::string_view(magic, 8) != "SSTREAM1")
    throw std::runtime_error("bad feature dump magic");
  LoadedFeatures lf;
  auto read_i64 = [&]() {
    std::int64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    return v;
  };
  lf.feature_dim = read_i64();
  lf.num_days = read_i64();
  lf.examples_per_day = read_i64();
  if (!in || lf.feature_dim <= 0 || lf.num_days <= 0 ||
      lf.examples_per_day <= 0)
    throw std::runtime_error("bad feature dump header");
  lf.days.reserve(static_cast<std::size_t>(lf.num_days));
  for (std::int64_t d = 0; d < lf.num_days; ++d) {
    Matrix f(lf.examples_per_day, lf.feature_dim);
    for (Index i = 0; i < f.rows(); ++i)
      for (Index j = 0; j < f.cols(); ++j) {
        double v;
        in.read(reinterpret_cast<char*>(&v), sizeof(v));
        f(i, j) = v;
      }
    lf.days.push_back(std::move(f));
  }
  if (!in) throw std::runtime_error("truncated feature dump");
  return lf;
}

}  // namespace clipbench::datastream
