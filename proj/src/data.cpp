#include "fedfreeze/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>
#include <numeric>

#include "fedfreeze/errors.hpp"

namespace fedfreeze {

void SyntheticParams::validate() const {
  if (classes < 2) throw InputError("synthetic data needs at least 2 classes");
  if (image_size == 0 || channels == 0) throw InputError("synthetic image size and channels must be positive");
  if (!(class_separation >= 0.0) || !std::isfinite(class_separation)) {
    throw InputError("class_separation must be non-negative");
  }
  if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) throw InputError("noise_sigma must be non-negative");
}

Tensor synthetic_templates(const SyntheticParams& params, Rng& rng) {
  params.validate();
  const std::size_t h = params.image_size;
  const double extent = static_cast<double>(h);
  const double two_pi = 2.0 * std::numbers::pi;
  // class k sits in its own (orientation, frequency band) cell with random jitter and phase
  const std::size_t bands = params.classes >= 4 ? 2 : 1;
  const std::size_t orientations = (params.classes + bands - 1) / bands;
  std::uniform_real_distribution<double> jitter(-0.2, 0.2);
  std::uniform_real_distribution<double> phase(0.0, two_pi);

  Tensor out({params.classes, params.channels, h, h});
  const std::size_t per_class = params.channels * h * h;
  for (std::size_t k = 0; k < params.classes; ++k) {
    std::vector<double> t(per_class, 0.0);
    const double cell = static_cast<double>(k % orientations);
    const double band = static_cast<double>(k / orientations);
    for (std::size_t c = 0; c < params.channels; ++c) {
      const double theta = std::numbers::pi * (cell + jitter(rng)) / static_cast<double>(orientations);
      const double f = (band + 1.0) * extent / 8.0 * (1.0 + 0.5 * jitter(rng));
      const double phi = phase(rng);
      const double fx = f * std::cos(theta) / extent;
      const double fy = f * std::sin(theta) / extent;
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < h; ++x) {
          t[(c * h + y) * h + x] =
              std::cos(two_pi * (fx * static_cast<double>(x) + fy * static_cast<double>(y)) + phi);
        }
      }
    }
    const double mean = std::accumulate(t.begin(), t.end(), 0.0) / static_cast<double>(per_class);
    double ss = 0.0;
    for (double& v : t) {
      v -= mean;
      ss += v * v;
    }
    const double rms = std::sqrt(ss / static_cast<double>(per_class));
    const double gain = rms > 0.0 ? params.class_separation / rms : 0.0;
    for (std::size_t i = 0; i < per_class; ++i) out[k * per_class + i] = static_cast<float>(t[i] * gain);
  }
  return out;
}

Dataset sample_synthetic(const SyntheticParams& params, const Tensor& templates, Rng& rng) {
  params.validate();
  const std::size_t h = params.image_size;
  require_shape(templates, {params.classes, params.channels, h, h}, "synthetic templates");
  const std::size_t per = params.channels * h * h;
  std::normal_distribution<double> noise(0.0, 1.0);
  Dataset out{Tensor({params.samples, params.channels, h, h}), std::vector<int>(params.samples)};
  for (std::size_t i = 0; i < params.samples; ++i) {
    const std::size_t k = i % params.classes;
    out.labels[i] = static_cast<int>(k);
    for (std::size_t p = 0; p < per; ++p) {
      out.images[i * per + p] =
          static_cast<float>(templates[k * per + p] + params.noise_sigma * noise(rng));
    }
  }
  return out;
}

Dataset generate_synthetic_dataset(const SyntheticParams& params, Rng& rng) {
  const Tensor templates = synthetic_templates(params, rng);
  return sample_synthetic(params, templates, rng);
}

namespace {

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_be32(const std::vector<unsigned char>& bytes, std::size_t offset, const std::string& what) {
  if (offset + 4 > bytes.size()) throw FormatError(what + ": truncated header");
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

void put_be32(std::ostream& out, std::uint32_t v) {
  const std::array<char, 4> b{static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                              static_cast<char>(v)};
  out.write(b.data(), 4);
}

}  // namespace

Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
  const std::vector<unsigned char> img = read_file(images_path);
  const std::vector<unsigned char> lab = read_file(labels_path);
  const std::string img_name = images_path.string();
  const std::string lab_name = labels_path.string();

  const std::uint32_t img_magic = read_be32(img, 0, img_name);
  if (img_magic != 0x00000803 && img_magic != 0x00000804) {
    throw FormatError(img_name + ": bad image magic " + std::to_string(img_magic));
  }
  const std::size_t dims = img_magic & 0xff;
  std::vector<std::size_t> d;
  for (std::size_t i = 0; i < dims; ++i) d.push_back(read_be32(img, 4 + 4 * i, img_name));
  const Shape shape = dims == 3 ? Shape{d[0], 1, d[1], d[2]} : Shape{d[0], d[1], d[2], d[3]};
  if (shape[2] != shape[3]) throw FormatError(img_name + ": images must be square");
  const std::size_t header = 4 + 4 * dims;
  const std::size_t volume = shape_volume(shape);
  if (img.size() < header + volume) throw FormatError(img_name + ": truncated pixel data");

  if (read_be32(lab, 0, lab_name) != 0x00000801) throw FormatError(lab_name + ": bad label magic");
  const std::size_t n_labels = read_be32(lab, 4, lab_name);
  if (lab.size() < 8 + n_labels) throw FormatError(lab_name + ": truncated label data");
  if (n_labels != shape[0]) {
    throw FormatError("image count " + std::to_string(shape[0]) + " does not match label count " +
                      std::to_string(n_labels));
  }

  Dataset out{Tensor(shape), std::vector<int>(n_labels)};
  for (std::size_t i = 0; i < volume; ++i) out.images[i] = static_cast<float>(img[header + i]) / 255.0f;
  for (std::size_t i = 0; i < n_labels; ++i) out.labels[i] = lab[8 + i];
  return out;
}

void write_idx(const Dataset& data, const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
               std::optional<std::pair<double, double>> value_range) {
  data.validate();
  for (int l : data.labels) {
    if (l < 0 || l > 255) throw InputError("label " + std::to_string(l) + " does not fit in a byte");
  }
  const auto& v = data.images.values();
  const auto [lo_it, hi_it] = std::minmax_element(v.begin(), v.end());
  double lo = v.empty() ? 0.0 : *lo_it;
  double span = v.empty() ? 0.0 : *hi_it - lo;
  if (value_range) {
    if (!(value_range->second >= value_range->first)) throw InputError("IDX value range must satisfy low <= high");
    lo = value_range->first;
    span = value_range->second - value_range->first;
  }

  std::ofstream img(images_path, std::ios::binary);
  if (!img) throw InputError("cannot write " + images_path.string());
  const Shape& s = data.images.shape();
  const bool single = s[1] == 1;
  put_be32(img, single ? 0x00000803 : 0x00000804);
  put_be32(img, static_cast<std::uint32_t>(s[0]));
  if (!single) put_be32(img, static_cast<std::uint32_t>(s[1]));
  put_be32(img, static_cast<std::uint32_t>(s[2]));
  put_be32(img, static_cast<std::uint32_t>(s[3]));
  std::vector<char> bytes(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double scaled = span > 0.0 ? (v[i] - lo) / span * 255.0 : 0.0;
    bytes[i] = static_cast<char>(static_cast<unsigned char>(std::clamp(std::nearbyint(scaled), 0.0, 255.0)));
  }
  img.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));

  std::ofstream lab(labels_path, std::ios::binary);
  if (!lab) throw InputError("cannot write " + labels_path.string());
  put_be32(lab, 0x00000801);
  put_be32(lab, static_cast<std::uint32_t>(data.size()));
  for (int l : data.labels) lab.put(static_cast<char>(l));
  if (!img || !lab) throw InputError("write failed");
}

std::vector<std::vector<std::size_t>> partition_indices(std::size_t dataset_size, std::size_t n_devices,
                                                        std::size_t shard_size, Rng& rng) {
  if (n_devices == 0 || shard_size == 0) throw InputError("device count and shard size must be positive");
  if (n_devices * shard_size > dataset_size) {
    throw InputError(std::to_string(n_devices) + " shards of " + std::to_string(shard_size) + " need more than " +
                     std::to_string(dataset_size) + " samples");
  }
  std::vector<std::size_t> order(dataset_size);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> out(n_devices);
  for (std::size_t d = 0; d < n_devices; ++d) {
    out[d].assign(order.begin() + static_cast<std::ptrdiff_t>(d * shard_size),
                  order.begin() + static_cast<std::ptrdiff_t>((d + 1) * shard_size));
  }
  return out;
}

std::vector<Dataset> partition_data(const Dataset& data, std::size_t n_devices, std::size_t shard_size, Rng& rng) {
  data.validate();
  std::vector<Dataset> out;
  for (const auto& idx : partition_indices(data.size(), n_devices, shard_size, rng)) out.push_back(data.gather(idx));
  return out;
}

std::size_t argmax_row(const Tensor& logits, std::size_t row) {
  const std::size_t cols = logits.dim(1);
  std::size_t best = 0;
  for (std::size_t k = 1; k < cols; ++k) {
    if (logits[row * cols + k] > logits[row * cols + best]) best = k;
  }
  return best;
}

double evaluate_accuracy(const ModelParams& params, const Topology& topology, const Dataset& test_set) {
  if (test_set.empty()) throw InputError("cannot evaluate on an empty test set");
  test_set.validate();
  constexpr std::size_t chunk = 256;
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < test_set.size(); start += chunk) {
    idx.resize(std::min(chunk, test_set.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const Dataset part = test_set.gather(idx);
    const Tensor logits = predict(params, topology, part.images);
    for (std::size_t i = 0; i < part.size(); ++i) {
      correct += static_cast<int>(argmax_row(logits, i)) == part.labels[i];
    }
  }
  return static_cast<double>(correct) / static_cast<double>(test_set.size());
}

}  // namespace fedfreeze
