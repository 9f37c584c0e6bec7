#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "clipbench/datastream.hpp"

using namespace clipbench;
using namespace clipbench::datastream;

namespace {

StreamConfig small_config() {
  StreamConfig cfg;
  cfg.feature_dim = 6;
  cfg.num_days = 5;
  cfg.examples_per_day = 512;
  cfg.mixture_components = 4;
  cfg.window_days = 2;
  cfg.batch_size = 64;
  cfg.seed = 7;
  return cfg;
}

// Critical values of the chi-square distribution at p = 0.01.
constexpr double kChi2Crit7 = 18.475307;
constexpr double kChi2Crit3 = 11.344867;

}  // namespace

TEST_CASE("pair rotation matches an independent recomputation") {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> dist(-2.0, 2.0);
  Matrix pts(3, 5);  // odd width: the last column must pass through untouched
  for (Index j = 0; j < 5; ++j)
    for (Index i = 0; i < 3; ++i) pts(i, j) = dist(rng);

  const double angle = 0.7;
  Matrix got = rotate_pairs(pts, angle);
  const double c = std::cos(angle), s = std::sin(angle);
  for (Index i = 0; i < 3; ++i) {
    for (Index j = 0; j + 1 < 5; j += 2) {
      CHECK(got(i, j) ==
            doctest::Approx(c * pts(i, j) - s * pts(i, j + 1)).epsilon(1e-12));
      CHECK(got(i, j + 1) ==
            doctest::Approx(s * pts(i, j) + c * pts(i, j + 1)).epsilon(1e-12));
    }
    CHECK(got(i, 4) == pts(i, 4));
  }
  CHECK((rotate_pairs(pts, 0.0).array() == pts.array()).all());
}

TEST_CASE("cumulative shift scale") {
  StreamConfig cfg = small_config();
  cfg.shift_events = {{2, 0.5}, {4, 0.2}};
  CHECK(scale_at(cfg, 0) == 1.0);
  CHECK(scale_at(cfg, 1) == 1.0);
  CHECK(scale_at(cfg, 2) == 1.5);
  CHECK(scale_at(cfg, 3) == 1.5);
  CHECK(scale_at(cfg, 4) == 1.5 * 1.2);
}

TEST_CASE("no drift leaves the mixture means fixed") {
  Stream stream(small_config(), models::default_tasks(2, 1));
  CHECK((stream.mixture_means(0).array() == stream.mixture_means(4).array())
            .all());
}

TEST_CASE("a zero-severity shift changes nothing") {
  StreamConfig plain = small_config();
  StreamConfig with_event = plain;
  with_event.shift_events = {{2, 0.0}};
  Stream a(plain, models::default_tasks(2, 1));
  Stream b(with_event, models::default_tasks(2, 1));
  for (int d = 0; d < plain.num_days; ++d) {
    CHECK((a.day(d).features.array() == b.day(d).features.array()).all());
    for (std::size_t k = 0; k < a.day(d).labels.size(); ++k)
      CHECK((a.day(d).labels[k] == b.day(d).labels[k]).all());
  }
}

TEST_CASE("streams and samplers replay bit-identically under a fixed seed") {
  StreamConfig cfg = small_config();
  Stream a(cfg, models::default_tasks(2, 1));
  Stream b(cfg, models::default_tasks(2, 1));
  CHECK((a.day(2).features.array() == b.day(2).features.array()).all());
  WindowSampler sa(a, 4, 99);
  WindowSampler sb(b, 4, 99);
  for (int i = 0; i < 20; ++i) {
    Batch ba = sa.next();
    Batch bb = sb.next();
    CHECK(ba.ids == bb.ids);
    CHECK(ba.day_stamp == bb.day_stamp);
    CHECK((ba.features.array() == bb.features.array()).all());
  }
}

TEST_CASE("batches point back into the window of the stamped day") {
  StreamConfig cfg = small_config();
  Stream stream(cfg, models::default_tasks(2, 1));
  const std::int64_t epd = cfg.examples_per_day;
  WindowSampler sampler(stream, 3, 5);
  for (int i = 0; i < 30; ++i) {
    Batch batch = sampler.next();
    CHECK(batch.day_stamp <= stream.train_days() - 1);
    for (std::size_t row = 0; row < batch.ids.size(); ++row) {
      std::int64_t id = batch.ids[row];
      int day = static_cast<int>(id / epd);
      Index idx = static_cast<Index>(id % epd);
      CHECK(day <= batch.day_stamp);
      CHECK(day >= std::max(0, batch.day_stamp - cfg.window_days + 1));
      const DayData& src = stream.day(day);
      CHECK((batch.features.row(static_cast<Index>(row)).array() ==
             src.features.row(idx).array())
                .all());
      for (std::size_t k = 0; k < batch.labels.size(); ++k)
        CHECK(batch.labels[k][static_cast<Index>(row)] == src.labels[k][idx]);
    }
  }
}

TEST_CASE("a one-day window only ever samples the active day") {
  StreamConfig cfg = small_config();
  cfg.window_days = 1;
  Stream stream(cfg, models::default_tasks(1, 1));
  WindowSampler sampler(stream, 2, 11);
  for (int i = 0; i < 16; ++i) {
    Batch batch = sampler.next();
    for (std::int64_t id : batch.ids)
      CHECK(id / cfg.examples_per_day == batch.day_stamp);
  }
}

TEST_CASE("two days means one train day and the sampler never advances") {
  StreamConfig cfg = small_config();
  cfg.num_days = 2;
  Stream stream(cfg, models::default_tasks(1, 1));
  CHECK(stream.train_days() == 1);
  CHECK(stream.holdout().day == 1);
  WindowSampler sampler(stream, 1, 3);
  for (int i = 0; i < 10; ++i) {
    Batch batch = sampler.next();
    CHECK(batch.day_stamp == 0);
    for (std::int64_t id : batch.ids) CHECK(id < cfg.examples_per_day);
  }
}

TEST_CASE("mixture components are drawn uniformly") {
  StreamConfig cfg = small_config();
  cfg.mixture_components = 8;
  cfg.examples_per_day = 4096;
  Stream stream(cfg, models::default_tasks(1, 0));
  std::vector<int> counts(8, 0);
  for (int c : stream.day(0).component) counts.at(static_cast<std::size_t>(c))++;
  const double expected = 4096.0 / 8.0;
  double chi2 = 0.0;
  for (int n : counts) chi2 += (n - expected) * (n - expected) / expected;
  CHECK(chi2 < kChi2Crit7);
}

TEST_CASE("a full window samples all train days uniformly") {
  StreamConfig cfg = small_config();
  cfg.num_days = 5;
  cfg.window_days = 4;
  cfg.batch_size = 256;
  Stream stream(cfg, models::default_tasks(1, 0));
  WindowSampler sampler(stream, 1, 17);
  for (int i = 0; i < 3; ++i) sampler.next();  // walk to the last train day
  std::vector<int> counts(4, 0);
  for (int i = 0; i < 40; ++i) {
    Batch batch = sampler.next();
    CHECK(batch.day_stamp == 3);
    for (std::int64_t id : batch.ids)
      counts.at(static_cast<std::size_t>(id / cfg.examples_per_day))++;
  }
  const double expected = 40.0 * 256.0 / 4.0;
  double chi2 = 0.0;
  for (int n : counts) chi2 += (n - expected) * (n - expected) / expected;
  CHECK(chi2 < kChi2Crit3);
}

TEST_CASE("drift displaces the means monotonically up to a half turn") {
  StreamConfig cfg = small_config();
  cfg.drift_rate = 0.05;
  cfg.num_days = 12;
  Stream stream(cfg, models::default_tasks(1, 1));
  Matrix base = stream.mixture_means(0);
  double prev = 0.0;
  for (int d = 1; d < cfg.num_days; ++d) {
    double dist = (stream.mixture_means(d) - base).norm();
    CHECK(dist >= prev - 1e-12);
    prev = dist;
  }
  CHECK(prev > 0.0);
}

TEST_CASE("a shift event jumps the feature second moment") {
  StreamConfig cfg = small_config();
  cfg.examples_per_day = 4096;
  cfg.shift_events = {{3, 1.0}};
  Stream stream(cfg, models::default_tasks(1, 1));
  auto second_moment = [&](int day) {
    return stream.day(day).features.array().square().mean();
  };
  CHECK(second_moment(3) / second_moment(2) > 1.0 + 1.0 / 2.0);
}

TEST_CASE("labels are calibrated, typed, and noise-seeded") {
  StreamConfig cfg = small_config();
  cfg.examples_per_day = 4096;
  auto tasks = models::default_tasks(2, 1);
  Stream stream(cfg, tasks);
  const DayData& day0 = stream.day(0);
  REQUIRE(day0.labels.size() == 3);
  for (int k = 0; k < 2; ++k) {
    const Array& y = day0.labels[static_cast<std::size_t>(k)];
    CHECK(((y == 0.0) || (y == 1.0)).all());
    double rate = y.mean();
    CHECK(rate > 0.4);  // thresholds sit at the calibration median
    CHECK(rate < 0.6);
  }
  const Array& reg = day0.labels[2];
  CHECK(reg.isFinite().all());
  CHECK(reg.maxCoeff() > reg.minCoeff());

  const Labeler& labeler = stream.labeler();
  auto la = labeler.label(day0.features, 1234);
  auto lb = labeler.label(day0.features, 1234);
  auto lc = labeler.label(day0.features, 5678);
  for (std::size_t k = 0; k < la.size(); ++k)
    CHECK((la[k] == lb[k]).all());
  bool any_diff = false;
  for (std::size_t k = 0; k < la.size(); ++k)
    any_diff = any_diff || !(la[k] == lc[k]).all();
  CHECK(any_diff);
  for (int k = 0; k < 3; ++k) CHECK(labeler.noise_std(k) > 0.0);
}

TEST_CASE("teacher logits have one column per task") {
  TeacherNet teacher(6, 3, 42);
  Matrix x = Matrix::Random(5, 6);
  Matrix logits = teacher.logits(x);
  CHECK(logits.rows() == 5);
  CHECK(logits.cols() == 3);
  CHECK(logits.array().isFinite().all());
}

TEST_CASE("feature dumps round-trip through the binary format") {
  StreamConfig cfg = small_config();
  Stream stream(cfg, models::default_tasks(1, 1));
  auto path = std::filesystem::temp_directory_path() / "clipbench_stream_rt.bin";
  dump_features(stream, path);
  LoadedFeatures loaded = load_features(path);
  CHECK(loaded.feature_dim == cfg.feature_dim);
  CHECK(loaded.num_days == cfg.num_days);
  CHECK(loaded.examples_per_day == cfg.examples_per_day);
  REQUIRE(loaded.days.size() == static_cast<std::size_t>(cfg.num_days));
  for (int d = 0; d < cfg.num_days; ++d)
    CHECK((loaded.days[static_cast<std::size_t>(d)].array() ==
           stream.day(d).features.array())
              .all());
  std::filesystem::remove(path);
}

TEST_CASE("corrupt feature dumps are rejected") {
  auto dir = std::filesystem::temp_directory_path();
  auto bad_magic = dir / "clipbench_stream_magic.bin";
  {
    std::ofstream out(bad_magic, std::ios::binary);
    out << "NOTMAGIC" << std::string(24, '\0');
  }
  CHECK_THROWS(load_features(bad_magic));
  std::filesystem::remove(bad_magic);

  StreamConfig cfg = small_config();
  cfg.num_days = 2;
  cfg.examples_per_day = 8;
  Stream stream(cfg, models::default_tasks(1, 0));
  auto truncated = dir / "clipbench_stream_trunc.bin";
  dump_features(stream, truncated);
  auto size = std::filesystem::file_size(truncated);
  std::filesystem::resize_file(truncated, size - 16);
  CHECK_THROWS(load_features(truncated));
  std::filesystem::remove(truncated);

  CHECK_THROWS(load_features(dir / "clipbench_stream_missing.bin"));
}
