// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The coda-prompt authors.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iterator>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "coda/random.hpp"
#include "coda/serialize.hpp"
#include "coda/tensor.hpp"
#include "json.hpp"

namespace coda {

/// Class ids at or above this value are reserved for pretraining streams.
inline constexpr std::uint32_t kPretextClassBase = 1'000'000;

struct BenchmarkSpec {
  std::size_t num_classes = 20;
  std::size_t num_tasks = 5;
  std::size_t train_per_class = 100;
  std::size_t test_per_class = 40;
  std::size_t num_domains = 6;
  std::size_t image_size = 16;
  double val_fraction = 0.2;
  /// Per-pixel Gaussian noise standard deviation.
  double noise = 0.15;
  /// Maximum translation of a sample's pattern, in pixels.
  double jitter = 1.0;
  /// Fraction of domains removed from each task's training data (0 = none).
  double dual_shift = 0.0;
  /// First class id; class ids are [class_offset, class_offset + num_classes).
  std::uint32_t class_offset = 0;

  std::size_t classes_per_task() const {
    return num_tasks == 0 ? 0 : num_classes / num_tasks;
  }
  std::size_t pixels() const { return image_size * image_size; }
  std::size_t val_per_class() const {
    return static_cast<std::size_t>(
        std::floor(val_fraction * static_cast<double>(train_per_class) + 1e-9));
  }

  std::vector<std::string> violations() const {
    std::vector<std::string> out;
    if (num_tasks == 0) out.push_back("benchmark.num_tasks must be positive");
    if (num_classes == 0) out.push_back("benchmark.num_classes must be positive");
    if (num_tasks > 0 && num_classes % num_tasks != 0) {
      out.push_back("benchmark.num_classes (" + std::to_string(num_classes) +
                    ") must be divisible by benchmark.num_tasks (" +
                    std::to_string(num_tasks) + ")");
    }
    if (num_domains == 0) out.push_back("benchmark.num_domains must be positive");
    if (image_size < 4) out.push_back("benchmark.image_size must be >= 4");
    if (!(val_fraction >= 0.0 && val_fraction < 1.0)) {
      out.push_back("benchmark.val_fraction must be in [0, 1)");
    }
    if (train_per_class == 0 || train_per_class <= val_per_class()) {
      out.push_back("benchmark.train_per_class must leave training samples "
                    "after the validation split");
    }
    if (!(noise >= 0.0)) out.push_back("benchmark.noise must be >= 0");
    if (!(jitter >= 0.0)) out.push_back("benchmark.jitter must be >= 0");
    if (!(dual_shift >= 0.0 && dual_shift < 1.0)) {
      out.push_back("benchmark.dual_shift must be in [0, 1)");
    } else if (num_domains > 0 &&
               removed_domain_count(dual_shift, num_domains) >= num_domains) {
      out.push_back("benchmark.dual_shift removes every domain");
    }
    if (class_offset < kPretextClassBase &&
        static_cast<std::uint64_t>(class_offset) + num_classes >
            kPretextClassBase) {
      out.push_back("benchmark class ids overlap the pretraining id range");
    }
    return out;
  }

  static std::size_t removed_domain_count(double fraction, std::size_t domains) {
    return static_cast<std::size_t>(
        std::floor(fraction * static_cast<double>(domains) + 1e-9));
  }

  bool operator==(const BenchmarkSpec&) const = default;
};

/// Samples of one split. labels are positions in the trial's class order;
/// class_ids are the generating template ids.
struct Split {
  Tensor images{Shape{0, 0}};
  std::vector<std::uint32_t> labels;
  std::vector<std::uint32_t> domains;
  std::vector<std::uint32_t> class_ids;

  std::size_t size() const { return labels.size(); }

  std::vector<std::size_t> domain_histogram(std::size_t num_domains) const {
    std::vector<std::size_t> h(num_domains, 0);
    for (auto d : domains) ++h.at(d);
    return h;
  }
};

struct Task {
  /// Global label range [label_begin, label_end).
  std::size_t label_begin = 0;
  std::size_t label_end = 0;
  Split train;
  Split val;
  Split test;
  std::vector<std::uint32_t> removed_domains;

  std::size_t num_classes() const { return label_end - label_begin; }
};

struct TaskStream {
  BenchmarkSpec spec;
  std::uint64_t seed = 0;
  /// class_order[label] = class id.
  std::vector<std::uint32_t> class_order;
  std::vector<Task> tasks;

  std::size_t num_tasks() const { return tasks.size(); }
  std::size_t num_classes() const { return class_order.size(); }
};

// ---------------------------------------------------------------------------
// Rendering

namespace detail {

inline constexpr std::uint64_t kTemplateFamily = 0x7e3a1c5b2d4f6081ULL;

struct Blob {
  double cx, cy, sigma, amp;
};

struct Pattern {
  std::array<Blob, 3> blobs;
  double angle, freq, phase, grating_amp;
};

inline Pattern class_template(std::uint32_t class_id, std::size_t size) {
  Rng rng(derive_seed(kTemplateFamily, {class_id}));
  const double s = static_cast<double>(size);
  Pattern p{};
  for (auto& b : p.blobs) {
    b.cx = rng.uniform(0.2 * s, 0.8 * s);
    b.cy = rng.uniform(0.2 * s, 0.8 * s);
    b.sigma = rng.uniform(0.08 * s, 0.19 * s);
    const double mag = rng.uniform(0.6, 1.2);
    b.amp = rng.uniform() < 0.5 ? -mag : mag;
  }
  p.angle = rng.uniform(0.0, std::numbers::pi);
  p.freq = rng.uniform(0.25, 0.9);
  p.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  p.grating_amp = rng.uniform(0.2, 0.5);
  return p;
}

inline void render(const Pattern& p, std::size_t size, double noise,
                   double jitter, Rng& rng, std::span<double> out) {
  const double dx = rng.uniform(-jitter, jitter);
  const double dy = rng.uniform(-jitter, jitter);
  const double gain = rng.uniform(0.85, 1.15);
  const double phase = p.phase + rng.uniform(-0.5, 0.5);
  const double ca = std::cos(p.angle);
  const double sa = std::sin(p.angle);
  for (std::size_t r = 0; r < size; ++r) {
    for (std::size_t c = 0; c < size; ++c) {
      const double x = static_cast<double>(c) - dx;
      const double y = static_cast<double>(r) - dy;
      double v = p.grating_amp * std::sin(p.freq * (ca * x + sa * y) + phase);
      for (const auto& b : p.blobs) {
        const double ex = x - b.cx;
        const double ey = y - b.cy;
        v += b.amp * std::exp(-(ex * ex + ey * ey) / (2.0 * b.sigma * b.sigma));
      }
      out[r * size + c] = gain * v;
    }
  }
  if (noise > 0.0) {
    for (double& v : out) v += noise * rng.normal();
  }
}

}  // namespace detail

/// Label-preserving covariate transform of domain d, applied in place.
/// Domains 0..5 are identity, negation, row stripes, 3x3 box blur,
/// contrast-and-offset and a 2x2 checkerboard; higher ids reuse those with an
/// extra diagonal wave whose frequency depends on the id.
inline void apply_domain(std::size_t domain, std::size_t size,
                         std::span<double> img) {
  switch (domain % 6) {
    case 0:
      break;
    case 1:
      for (double& v : img) v = -v;
      break;
    case 2:
      for (std::size_t r = 0; r < size; ++r) {
        const double s = (r / 2) % 2 == 0 ? 0.6 : -0.6;
        for (std::size_t c = 0; c < size; ++c) img[r * size + c] += s;
      }
      break;
    case 3: {
      std::vector<double> src(img.begin(), img.end());
      auto at = [&](std::ptrdiff_t r, std::ptrdiff_t c) {
        const auto n = static_cast<std::ptrdiff_t>(size);
        r = std::clamp<std::ptrdiff_t>(r, 0, n - 1);
        c = std::clamp<std::ptrdiff_t>(c, 0, n - 1);
        return src[static_cast<std::size_t>(r) * size + static_cast<std::size_t>(c)];
      };
      for (std::size_t r = 0; r < size; ++r) {
        for (std::size_t c = 0; c < size; ++c) {
          double acc = 0.0;
          for (int i = -1; i <= 1; ++i) {
            for (int j = -1; j <= 1; ++j) {
              acc += at(static_cast<std::ptrdiff_t>(r) + i,
                        static_cast<std::ptrdiff_t>(c) + j);
            }
          }
          img[r * size + c] = acc / 9.0;
        }
      }
      break;
    }
    case 4:
      for (double& v : img) v = 0.4 * v + 0.5;
      break;
    case 5:
      for (std::size_t r = 0; r < size; ++r) {
        for (std::size_t c = 0; c < size; ++c) {
          img[r * size + c] += ((r / 2 + c / 2) % 2 == 0) ? 0.5 : -0.5;
        }
      }
      break;
  }
  if (domain >= 6) {
    const double f = 0.7 * static_cast<double>(domain / 6);
    for (std::size_t r = 0; r < size; ++r) {
      for (std::size_t c = 0; c < size; ++c) {
        img[r * size + c] += 0.4 * std::sin(f * static_cast<double>(r + c));
      }
    }
  }
}

/// Renders sample `index` of a class for split kind 0 (train) or 1 (test).
/// Domains are assigned round-robin over sample indices.
inline void render_sample(const BenchmarkSpec& spec, std::uint64_t seed,
                          std::uint32_t class_id, std::uint32_t split_kind,
                          std::size_t index, std::span<double> out) {
  const auto pattern = detail::class_template(class_id, spec.image_size);
  Rng rng(derive_seed(seed, Stream::kSamples, {class_id, split_kind, index}));
  detail::render(pattern, spec.image_size, spec.noise, spec.jitter, rng, out);
  apply_domain(index % spec.num_domains, spec.image_size, out);
}

namespace detail {

struct PendingSample {
  std::uint32_t label, class_id, split_kind;
  std::size_t index;
};

inline Split materialize(const BenchmarkSpec& spec, std::uint64_t seed,
                         const std::vector<PendingSample>& samples) {
  Split s;
  s.images = Tensor({samples.size(), spec.pixels()});
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& p = samples[i];
    render_sample(spec, seed, p.class_id, p.split_kind, p.index,
                  s.images.row(i));
    s.labels.push_back(p.label);
    s.class_ids.push_back(p.class_id);
    s.domains.push_back(
        static_cast<std::uint32_t>(p.index % spec.num_domains));
  }
  return s;
}

inline Split filter(const Split& src, const std::vector<bool>& keep_domain) {
  std::vector<std::size_t> kept;
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (keep_domain[src.domains[i]]) kept.push_back(i);
  }
  Split out;
  out.images = Tensor({kept.size(), src.images.dim(1)});
  for (std::size_t k = 0; k < kept.size(); ++k) {
    const std::size_t i = kept[k];
    std::copy(src.images.row(i).begin(), src.images.row(i).end(),
              out.images.row(k).begin());
    out.labels.push_back(src.labels[i]);
    out.domains.push_back(src.domains[i]);
    out.class_ids.push_back(src.class_ids[i]);
  }
  return out;
}

}  // namespace detail

/// Removes, independently per task, floor(fraction * num_domains) randomly
/// chosen domains from the train and val splits. Test splits are untouched.
inline TaskStream apply_dual_shift(TaskStream stream, double fraction,
                                   std::uint64_t seed) {
  const std::size_t nd = stream.spec.num_domains;
  if (!(fraction >= 0.0 && fraction < 1.0)) {
    throw ConfigError("dual-shift fraction must be in [0, 1)");
  }
  const std::size_t removed = BenchmarkSpec::removed_domain_count(fraction, nd);
  if (removed >= nd) {
    throw ConfigError("dual shift would remove all " + std::to_string(nd) +
                      " domains");
  }
  stream.spec.dual_shift = fraction;
  if (removed == 0) return stream;
  for (std::size_t t = 0; t < stream.tasks.size(); ++t) {
    Task& task = stream.tasks[t];
    Rng rng(derive_seed(seed, Stream::kDualShift, {t}));
    auto perm = rng.permutation(nd);
    std::vector<bool> keep(nd, true);
    task.removed_domains.clear();
    for (std::size_t i = 0; i < removed; ++i) {
      keep[perm[i]] = false;
      task.removed_domains.push_back(static_cast<std::uint32_t>(perm[i]));
    }
    std::sort(task.removed_domains.begin(), task.removed_domains.end());
    task.train = detail::filter(task.train, keep);
    task.val = detail::filter(task.val, keep);
    if (task.train.size() == 0) {
      throw ConfigError("dual shift emptied the training split of task " +
                        std::to_string(t));
    }
  }
  return stream;
}

/// Shuffles classes by seed, partitions them into equal tasks and renders
/// every split. A nonzero spec.dual_shift is applied at the end.
inline TaskStream generate_benchmark(const BenchmarkSpec& spec,
                                     std::uint64_t seed) {
  const auto v = spec.violations();
  if (!v.empty()) {
    std::string msg = "invalid benchmark:";
    for (const auto& s : v) msg += "\n  " + s;
    throw ConfigError(msg);
  }
  TaskStream stream;
  stream.spec = spec;
  stream.spec.dual_shift = 0.0;
  stream.seed = seed;
  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    stream.class_order.push_back(spec.class_offset +
                                 static_cast<std::uint32_t>(c));
  }
  Rng order_rng(derive_seed(seed, Stream::kClassOrder));
  order_rng.shuffle(stream.class_order);

  const std::size_t per_task = spec.classes_per_task();
  const std::size_t n_val = spec.val_per_class();
  for (std::size_t t = 0; t < spec.num_tasks; ++t) {
    Task task;
    task.label_begin = t * per_task;
    task.label_end = (t + 1) * per_task;
    std::vector<detail::PendingSample> train, val, test;
    for (std::size_t label = task.label_begin; label < task.label_end; ++label) {
      const std::uint32_t cid = stream.class_order[label];
      const auto l = static_cast<std::uint32_t>(label);
      Rng split_rng(derive_seed(seed, Stream::kSplit, {cid}));
      auto perm = split_rng.permutation(spec.train_per_class);
      std::vector<bool> is_val(spec.train_per_class, false);
      for (std::size_t i = 0; i < n_val; ++i) is_val[perm[i]] = true;
      for (std::size_t i = 0; i < spec.train_per_class; ++i) {
        (is_val[i] ? val : train).push_back({l, cid, 0, i});
      }
      for (std::size_t i = 0; i < spec.test_per_class; ++i) {
        test.push_back({l, cid, 1, i});
      }
    }
    task.train = detail::materialize(spec, seed, train);
    task.val = detail::materialize(spec, seed, val);
    task.test = detail::materialize(spec, seed, test);
    stream.tasks.push_back(std::move(task));
  }
  if (spec.dual_shift > 0.0) {
    stream = apply_dual_shift(std::move(stream), spec.dual_shift, seed);
  }
  return stream;
}

/// Throws ConfigError when the two streams share a class id.
inline void check_disjoint(const TaskStream& a, const TaskStream& b) {
  std::vector<std::uint32_t> x = a.class_order, y = b.class_order;
  std::sort(x.begin(), x.end());
  std::sort(y.begin(), y.end());
  std::vector<std::uint32_t> both;
  std::set_intersection(x.begin(), x.end(), y.begin(), y.end(),
                        std::back_inserter(both));
  if (!both.empty()) {
    throw ConfigError("pretraining and benchmark streams share class id " +
                      std::to_string(both.front()));
  }
}

struct PretextSpec {
  std::size_t num_classes = 100;
  std::size_t train_per_class = 60;
  std::size_t test_per_class = 0;
  bool operator==(const PretextSpec&) const = default;
};

/// Single-task stream of pretraining classes drawn from the reserved id
/// range, rendered with the benchmark's image settings and domains.
inline TaskStream pretext_split(const PretextSpec& pretext,
                                const BenchmarkSpec& like, std::uint64_t seed) {
  BenchmarkSpec spec = like;
  spec.num_classes = pretext.num_classes;
  spec.num_tasks = 1;
  spec.train_per_class = pretext.train_per_class;
  spec.test_per_class = pretext.test_per_class;
  spec.dual_shift = 0.0;
  spec.class_offset = kPretextClassBase;
  return generate_benchmark(spec, seed);
}

/// Copies the given rows of a [N x ...] tensor into a new tensor.
inline Tensor gather_rows(const Tensor& src, std::span<const std::size_t> idx) {
  Shape shape = src.shape();
  shape[0] = idx.size();
  Tensor out(shape);
  const std::size_t row = src.row_size();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::copy_n(src.row(idx[i]).begin(), row, out.data().begin() + static_cast<std::ptrdiff_t>(i * row));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Persistence

inline nlohmann::json to_json(const BenchmarkSpec& s) {
  return {{"num_classes", s.num_classes},   {"num_tasks", s.num_tasks},
          {"train_per_class", s.train_per_class},
          {"test_per_class", s.test_per_class},
          {"num_domains", s.num_domains},   {"image_size", s.image_size},
          {"val_fraction", s.val_fraction}, {"noise", s.noise},
          {"jitter", s.jitter},             {"dual_shift", s.dual_shift},
          {"class_offset", s.class_offset}};
}

inline constexpr std::string_view kBenchmarkMagic = "CODABNCH";

namespace detail {
inline const char* kSplitNames[] = {"train", "val", "test"};

inline Split& split_of(Task& t, int k) {
  return k == 0 ? t.train : (k == 1 ? t.val : t.test);
}
inline const Split& split_of(const Task& t, int k) {
  return k == 0 ? t.train : (k == 1 ? t.val : t.test);
}

inline std::uint64_t split_checksum(const Split& s) {
  io::Container c(kBenchmarkMagic);
  c.add_tensor("images", s.images);
  c.add_u32("labels", s.labels);
  c.add_u32("domains", s.domains);
  c.add_u32("class_ids", s.class_ids);
  return io::fnv1a(c.encode());
}
}  // namespace detail

inline io::Container benchmark_container(const TaskStream& stream) {
  io::Container c(kBenchmarkMagic);
  nlohmann::json meta = {{"spec", to_json(stream.spec)},
                         {"seed", stream.seed},
                         {"num_tasks", stream.tasks.size()}};
  c.add_text("meta", meta.dump());
  c.add_u32("class_order", stream.class_order);
  for (std::size_t t = 0; t < stream.tasks.size(); ++t) {
    const Task& task = stream.tasks[t];
    const std::string p = "task" + std::to_string(t) + ".";
    c.add_u32(p + "labels", {static_cast<std::uint32_t>(task.label_begin),
                             static_cast<std::uint32_t>(task.label_end)});
    c.add_u32(p + "removed_domains", task.removed_domains);
    for (int k = 0; k < 3; ++k) {
      const Split& s = detail::split_of(task, k);
      const std::string q = p + detail::kSplitNames[k] + ".";
      c.add_tensor(q + "images", s.images);
      c.add_u32(q + "labels", s.labels);
      c.add_u32(q + "domains", s.domains);
      c.add_u32(q + "class_ids", s.class_ids);
    }
  }
  return c;
}

/// Human-readable index of a benchmark file: spec, seed, class order and,
/// per task and split, sample counts, domain histograms and checksums.
inline nlohmann::json benchmark_manifest(const TaskStream& stream,
                                         std::uint64_t file_checksum) {
  nlohmann::json tasks = nlohmann::json::array();
  for (const Task& task : stream.tasks) {
    nlohmann::json splits;
    for (int k = 0; k < 3; ++k) {
      const Split& s = detail::split_of(task, k);
      splits[detail::kSplitNames[k]] = {
          {"count", s.size()},
          {"domain_histogram", s.domain_histogram(stream.spec.num_domains)},
          {"fnv1a", io::hex64(detail::split_checksum(s))}};
    }
    tasks.push_back({{"labels", {task.label_begin, task.label_end}},
                     {"removed_domains", task.removed_domains},
                     {"splits", splits}});
  }
  return {{"format", std::string(kBenchmarkMagic)},
          {"version", io::Container::kVersion},
          {"seed", stream.seed},
          {"spec", to_json(stream.spec)},
          {"class_order", stream.class_order},
          {"tasks", tasks},
          {"file_fnv1a", io::hex64(file_checksum)}};
}

/// Writes <path> and <path>.manifest.json.
inline void write_benchmark(const std::filesystem::path& path,
                            const TaskStream& stream) {
  const std::string bytes = benchmark_container(stream).encode();
  io::write_bytes(path, bytes);
  io::write_bytes(path.string() + ".manifest.json",
                  benchmark_manifest(stream, io::fnv1a(bytes)).dump(2) + "\n");
}

inline TaskStream read_benchmark(const std::filesystem::path& path) {
  const auto c = io::read_container(path, kBenchmarkMagic);
  const auto meta = nlohmann::json::parse(c.text("meta"));
  TaskStream stream;
  const auto& j = meta.at("spec");
  auto& s = stream.spec;
  s.num_classes = j.at("num_classes");
  s.num_tasks = j.at("num_tasks");
  s.train_per_class = j.at("train_per_class");
  s.test_per_class = j.at("test_per_class");
  s.num_domains = j.at("num_domains");
  s.image_size = j.at("image_size");
  s.val_fraction = j.at("val_fraction");
  s.noise = j.at("noise");
  s.jitter = j.at("jitter");
  s.dual_shift = j.at("dual_shift");
  s.class_offset = j.at("class_offset");
  stream.seed = meta.at("seed");
  stream.class_order = c.u32("class_order");
  const std::size_t n = meta.at("num_tasks");
  for (std::size_t t = 0; t < n; ++t) {
    Task task;
    const std::string p = "task" + std::to_string(t) + ".";
    const auto& range = c.u32(p + "labels");
    if (range.size() != 2) throw IoError("bad label range for task " + std::to_string(t));
    task.label_begin = range[0];
    task.label_end = range[1];
    task.removed_domains = c.u32(p + "removed_domains");
    for (int k = 0; k < 3; ++k) {
      Split& sp = detail::split_of(task, k);
      const std::string q = p + detail::kSplitNames[k] + ".";
      sp.images = c.tensor(q + "images");
      sp.labels = c.u32(q + "labels");
      sp.domains = c.u32(q + "domains");
      sp.class_ids = c.u32(q + "class_ids");
    }
    stream.tasks.push_back(std::move(task));
  }
  return stream;
}

}  // namespace coda
