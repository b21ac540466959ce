#include "twins/workbench/data_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <random>
#include <vector>

namespace twins::workbench {

namespace {

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IdxError(IdxError::Kind::Io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_be32(const std::vector<unsigned char>& bytes, std::size_t offset, const std::string& what) {
  if (bytes.size() < offset + 4) throw IdxError(IdxError::Kind::Truncated, what + ": header truncated");
  return (std::uint32_t(bytes[offset]) << 24) | (std::uint32_t(bytes[offset + 1]) << 16) |
         (std::uint32_t(bytes[offset + 2]) << 8) | std::uint32_t(bytes[offset + 3]);
}

void write_be32(std::ostream& out, std::uint32_t v) {
  const char b[4] = {char(v >> 24), char(v >> 16), char(v >> 8), char(v)};
  out.write(b, 4);
}

}  // namespace

SplitDataset gen_synthetic_dataset(const DatasetSpec& spec) {
  if (spec.classes < 2) throw InvalidArgument("synthetic dataset needs at least 2 classes");
  if (spec.channels < 1 || spec.height < 1 || spec.width < 1 || spec.train_per_class < 0 || spec.val_per_class < 0 ||
      !(spec.noise >= 0.0)) {
    throw InvalidArgument("synthetic dataset: invalid shape, counts or noise");
  }
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  std::normal_distribution<double> gaussian(0.0, 1.0);

  const Index pixels = spec.channels * spec.height * spec.width;
  std::vector<std::vector<double>> templates(static_cast<std::size_t>(spec.classes));
  for (auto& t : templates) {
    t.resize(static_cast<std::size_t>(pixels));
    for (auto& v : t) v = uniform(rng);
  }

  auto draw = [&](Index per_class) {
    Dataset<float> d;
    d.classes = spec.classes;
    const Index n = per_class * spec.classes;
    if (n == 0) return d;
    d.images = Tensor<float>({n, spec.channels, spec.height, spec.width});
    d.labels.resize(static_cast<std::size_t>(n));
    // Class-interleaved order: sample i has label i mod K.
    for (Index i = 0; i < n; ++i) {
      const Index label = i % spec.classes;
      d.labels[static_cast<std::size_t>(i)] = static_cast<int>(label);
      const auto& t = templates[static_cast<std::size_t>(label)];
      for (Index k = 0; k < pixels; ++k) {
        const double noise = spec.noise > 0 ? spec.noise * gaussian(rng) : 0.0;
        d.images[i * pixels + k] = float(std::clamp(t[static_cast<std::size_t>(k)] + noise, 0.0, 1.0));
      }
    }
    return d;
  };
  SplitDataset out;
  out.train = draw(spec.train_per_class);
  out.val = draw(spec.val_per_class);
  return out;
}

Dataset<float> load_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
  const auto img = read_file(images);
  const auto lab = read_file(labels);

  const std::uint32_t img_magic = read_be32(img, 0, images.string());
  if (img_magic != 0x00000803 && img_magic != 0x00000804) {
    throw IdxError(IdxError::Kind::BadMagic, images.string() + ": bad image magic " + std::to_string(img_magic));
  }
  const std::uint32_t lab_magic = read_be32(lab, 0, labels.string());
  if (lab_magic != 0x00000801) {
    throw IdxError(IdxError::Kind::BadMagic, labels.string() + ": bad label magic " + std::to_string(lab_magic));
  }

  const int dims = img_magic == 0x00000803 ? 3 : 4;
  std::vector<Index> d;
  for (int i = 0; i < dims; ++i) d.push_back(read_be32(img, 4 + 4 * std::size_t(i), images.string()));
  const Index n = d[0];
  const Index channels = dims == 3 ? 1 : d[1];
  const Index rows = d[dims - 2], cols = d[dims - 1];
  const std::size_t img_header = 4 + 4 * std::size_t(dims);
  const std::size_t pixel_count = std::size_t(n * channels * rows * cols);
  if (img.size() < img_header + pixel_count) {
    throw IdxError(IdxError::Kind::Truncated, images.string() + ": payload shorter than declared dimensions");
  }

  const Index label_count = read_be32(lab, 4, labels.string());
  if (lab.size() < 8 + std::size_t(label_count)) {
    throw IdxError(IdxError::Kind::Truncated, labels.string() + ": payload shorter than declared count");
  }
  if (label_count != n) {
    throw IdxError(IdxError::Kind::CountMismatch, "image count " + std::to_string(n) + " does not match label count " +
                                                      std::to_string(label_count));
  }

  Dataset<float> out;
  if (n == 0) return out;
  out.images = Tensor<float>({n, channels, rows, cols});
  for (std::size_t i = 0; i < pixel_count; ++i) out.images[Index(i)] = float(img[img_header + i]) / 255.0f;
  out.labels.resize(std::size_t(n));
  int max_label = 0;
  for (Index i = 0; i < n; ++i) {
    out.labels[std::size_t(i)] = lab[8 + std::size_t(i)];
    max_label = std::max(max_label, out.labels[std::size_t(i)]);
  }
  out.classes = max_label + 1;
  return out;
}

void write_idx(const Dataset<float>& data, const std::filesystem::path& images, const std::filesystem::path& labels) {
  std::ofstream img(images, std::ios::binary);
  std::ofstream lab(labels, std::ios::binary);
  if (!img || !lab) throw IdxError(IdxError::Kind::Io, "cannot write " + images.string() + " / " + labels.string());
  const auto& s = data.images.shape();
  const bool gray = s[1] == 1;
  write_be32(img, gray ? 0x00000803 : 0x00000804);
  write_be32(img, std::uint32_t(s[0]));
  if (!gray) write_be32(img, std::uint32_t(s[1]));
  write_be32(img, std::uint32_t(s[2]));
  write_be32(img, std::uint32_t(s[3]));
  for (Index i = 0; i < data.images.size(); ++i) {
    img.put(char(static_cast<unsigned char>(std::lround(std::clamp(data.images[i], 0.0f, 1.0f) * 255.0f))));
  }
  write_be32(lab, 0x00000801);
  write_be32(lab, std::uint32_t(data.labels.size()));
  for (int l : data.labels) lab.put(char(static_cast<unsigned char>(l)));
  if (!img || !lab) throw IdxError(IdxError::Kind::Io, "write failed for " + images.string());
}

SplitDataset load_dataset(const DatasetSpec& spec) {
  if (spec.source == DatasetSpec::Source::Synthetic) return gen_synthetic_dataset(spec);
  SplitDataset out{load_idx(spec.train_images, spec.train_labels), load_idx(spec.val_images, spec.val_labels)};
  out.train.classes = out.val.classes = std::max(out.train.classes, out.val.classes);
  return out;
}

}  // namespace twins::workbench
