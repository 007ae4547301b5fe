#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "wscl/errors.hpp"
#include "wscl/random.hpp"
#include "wscl/tensor.hpp"

namespace wscl {

// A labeled pool of examples; the raw material a task stream is cut from.
struct Dataset {
  Shape feature_shape;
  std::size_t num_classes = 0;
  Tensor features;  // (n, volume(feature_shape))
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t feature_dim() const { return shape_volume(feature_shape); }
  bool is_image() const { return feature_shape.size() == 3; }

  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> counts(num_classes, 0);
    for (int y : labels) ++counts[static_cast<std::size_t>(y)];
    return counts;
  }

  void validate() const {
    if (features.rows() != labels.size()) throw ConfigError("dataset: feature/label count mismatch");
    if (size() > 0 && features.row_size() != feature_dim()) throw ConfigError("dataset: feature width mismatch");
    for (int y : labels)
      if (y < 0 || static_cast<std::size_t>(y) >= num_classes)
        throw ConfigError("dataset: class id " + std::to_string(y) + " out of range");
  }
};

struct DatasetPair {
  Dataset train;
  Dataset test;
};

// ---------------------------------------------------------------------------
// Synthetic generators

struct BlobOptions {
  std::size_t num_classes = 10;
  std::size_t dim = 16;
  std::size_t modes_per_class = 1;  // sub-clusters per class
  double separation = 3.0;          // scale of the class-centre cloud
  double mode_spread = 1.0;         // scale of sub-cluster offsets around a class centre
  double noise = 1.0;               // within-mode standard deviation
};

// Gaussian-blob classes. `structure_seed` fixes the centres (the "dataset");
// `sample_seed` draws the examples.
inline DatasetPair make_blobs(const BlobOptions& o, std::size_t train_per_class, std::size_t test_per_class,
                              std::uint64_t structure_seed, std::uint64_t sample_seed) {
  if (o.num_classes == 0 || o.dim == 0 || o.modes_per_class == 0) throw ConfigError("blobs: empty configuration");
  Rng structure(structure_seed);
  std::vector<std::vector<double>> modes(o.num_classes * o.modes_per_class, std::vector<double>(o.dim));
  for (std::size_t c = 0; c < o.num_classes; ++c) {
    std::vector<double> centre(o.dim);
    for (double& v : centre) v = structure.normal(0.0, o.separation);
    for (std::size_t m = 0; m < o.modes_per_class; ++m)
      for (std::size_t d = 0; d < o.dim; ++d)
        modes[c * o.modes_per_class + m][d] =
            centre[d] + (o.modes_per_class > 1 ? structure.normal(0.0, o.mode_spread) : 0.0);
  }
  Rng rng(sample_seed);
  auto draw = [&](std::size_t per_class) {
    Dataset ds;
    ds.feature_shape = {o.dim};
    ds.num_classes = o.num_classes;
    ds.features = Tensor({per_class * o.num_classes, o.dim});
    std::size_t row = 0;
    for (std::size_t c = 0; c < o.num_classes; ++c)
      for (std::size_t i = 0; i < per_class; ++i, ++row) {
        const auto& mode = modes[c * o.modes_per_class + rng.index(o.modes_per_class)];
        auto x = ds.features.row(row);
        for (std::size_t d = 0; d < o.dim; ++d) x[d] = mode[d] + rng.normal(0.0, o.noise);
        ds.labels.push_back(static_cast<int>(c));
      }
    return ds;
  };
  DatasetPair out;
  out.train = draw(train_per_class);
  out.test = draw(test_per_class);
  return out;
}

struct DigitOptions {
  double noise = 0.15;       // additive pixel noise std
  double dropout = 0.1;      // probability an ink pixel is erased
  int max_shift = 1;         // random translation in pixels
};

namespace detail {
// 8x8 glyphs for 0-9, '#' is ink.
inline const std::array<std::array<const char*, 8>, 10>& digit_glyphs() {
  static const std::array<std::array<const char*, 8>, 10> glyphs = {{
      {"..####..", ".#....#.", ".#...##.", ".#..#.#.", ".#.#..#.", ".##...#.", ".#....#.", "..####.."},
      {"...##...", "..###...", ".#.##...", "...##...", "...##...", "...##...", "...##...", ".######."},
      {"..####..", ".#....#.", "......#.", ".....#..", "....#...", "...#....", "..#.....", ".######."},
      {"..####..", ".#....#.", "......#.", "...###..", "......#.", "......#.", ".#....#.", "..####.."},
      {".....#..", "....##..", "...#.#..", "..#..#..", ".#...#..", ".######.", ".....#..", ".....#.."},
      {".######.", ".#......", ".#......", ".#####..", "......#.", "......#.", ".#....#.", "..####.."},
      {"..####..", ".#......", ".#......", ".#####..", ".#....#.", ".#....#.", ".#....#.", "..####.."},
      {".######.", "......#.", ".....#..", "....#...", "...#....", "...#....", "...#....", "...#...."},
      {"..####..", ".#....#.", ".#....#.", "..####..", ".#....#.", ".#....#.", ".#....#.", "..####.."},
      {"..####..", ".#....#.", ".#....#.", ".#....#.", "..#####.", "......#.", "......#.", "..####.."},
  }};
  return glyphs;
}
}  // namespace detail

// Low-resolution (1x8x8) digit images rendered from fixed glyphs with random
// translation, stroke dropout, intensity jitter and pixel noise.
inline DatasetPair make_digits(const DigitOptions& o, std::size_t train_per_class, std::size_t test_per_class,
                               std::uint64_t sample_seed) {
  Rng rng(sample_seed);
  const auto& glyphs = detail::digit_glyphs();
  auto draw = [&](std::size_t per_class) {
    Dataset ds;
    ds.feature_shape = {1, 8, 8};
    ds.num_classes = 10;
    ds.features = Tensor({per_class * 10, 64});
    std::size_t row = 0;
    for (std::size_t c = 0; c < 10; ++c)
      for (std::size_t i = 0; i < per_class; ++i, ++row) {
        const int span = 2 * o.max_shift + 1;
        const int dy = static_cast<int>(rng.index(static_cast<std::size_t>(span))) - o.max_shift;
        const int dx = static_cast<int>(rng.index(static_cast<std::size_t>(span))) - o.max_shift;
        const double ink = 0.7 + 0.3 * rng.uniform();
        auto x = ds.features.row(row);
        for (int r = 0; r < 8; ++r)
          for (int col = 0; col < 8; ++col) {
            const int sr = r - dy, sc = col - dx;
            double v = 0.0;
            if (sr >= 0 && sr < 8 && sc >= 0 && sc < 8 && glyphs[c][static_cast<std::size_t>(sr)][sc] == '#' &&
                !rng.bernoulli(o.dropout))
              v = ink;
            x[static_cast<std::size_t>(r * 8 + col)] = v + rng.normal(0.0, o.noise);
          }
        ds.labels.push_back(static_cast<int>(c));
      }
    return ds;
  };
  DatasetPair out;
  out.train = draw(train_per_class);
  out.test = draw(test_per_class);
  return out;
}

// ---------------------------------------------------------------------------
// Container format
//
// Binary, little-endian:
//   bytes 0..7   magic "WSCLDS01"
//   u64          n (rows)
//   u64          feature_dims
//   u64          num_classes
//   u32          flags (bit 0: rows carry a task_id column)
//   u32          reserved (0)
//   n rows of:   i32 class_id, [i32 task_id], f64 x feature_dims
//
// CSV: first line "n,feature_dims,num_classes", then one line per row
// "class_id,f_0,...,f_{d-1}" (or "class_id,task_id,f_0,..." when a task
// column is present; the header then carries a 4th field "task_id").

inline constexpr char kContainerMagic[8] = {'W', 'S', 'C', 'L', 'D', 'S', '0', '1'};

// Rows as stored in a container file. task_ids is empty when absent.
struct ContainerRows {
  std::size_t feature_dims = 0;
  std::size_t num_classes = 0;
  Tensor features;
  std::vector<int> labels;
  std::vector<int> task_ids;
};

namespace detail {
template <typename T>
void write_le(std::ostream& os, T value) {
  std::array<unsigned char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  os.write(reinterpret_cast<const char*>(bytes.data()), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
  std::array<unsigned char, sizeof(T)> bytes;
  if (!is.read(reinterpret_cast<char*>(bytes.data()), sizeof(T))) throw IoError("container: truncated file");
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  T value;
  std::memcpy(&value, bytes.data(), sizeof(T));
  return value;
}
}  // namespace detail

inline void write_container(std::ostream& os, const ContainerRows& rows) {
  const bool with_task = !rows.task_ids.empty();
  os.write(kContainerMagic, 8);
  detail::write_le<std::uint64_t>(os, rows.labels.size());
  detail::write_le<std::uint64_t>(os, rows.feature_dims);
  detail::write_le<std::uint64_t>(os, rows.num_classes);
  detail::write_le<std::uint32_t>(os, with_task ? 1u : 0u);
  detail::write_le<std::uint32_t>(os, 0u);
  for (std::size_t i = 0; i < rows.labels.size(); ++i) {
    detail::write_le<std::int32_t>(os, rows.labels[i]);
    if (with_task) detail::write_le<std::int32_t>(os, rows.task_ids[i]);
    for (double v : rows.features.row(i)) detail::write_le<double>(os, v);
  }
}

inline ContainerRows read_container(std::istream& is) {
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kContainerMagic, 8) != 0) throw IoError("container: bad magic");
  ContainerRows rows;
  const auto n = detail::read_le<std::uint64_t>(is);
  rows.feature_dims = detail::read_le<std::uint64_t>(is);
  rows.num_classes = detail::read_le<std::uint64_t>(is);
  const auto flags = detail::read_le<std::uint32_t>(is);
  detail::read_le<std::uint32_t>(is);
  const bool with_task = flags & 1u;
  rows.features = Tensor({n, rows.feature_dims});
  for (std::size_t i = 0; i < n; ++i) {
    rows.labels.push_back(detail::read_le<std::int32_t>(is));
    if (with_task) rows.task_ids.push_back(detail::read_le<std::int32_t>(is));
    for (double& v : rows.features.row(i)) v = detail::read_le<double>(is);
  }
  return rows;
}

inline void write_container_csv(std::ostream& os, const ContainerRows& rows) {
  const bool with_task = !rows.task_ids.empty();
  os << rows.labels.size() << ',' << rows.feature_dims << ',' << rows.num_classes << (with_task ? ",task_id" : "")
     << '\n';
  os.precision(17);
  for (std::size_t i = 0; i < rows.labels.size(); ++i) {
    os << rows.labels[i];
    if (with_task) os << ',' << rows.task_ids[i];
    for (double v : rows.features.row(i)) os << ',' << v;
    os << '\n';
  }
}

inline ContainerRows read_container_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw IoError("csv container: missing header");
  std::vector<std::string> head;
  {
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) head.push_back(f);
  }
  if (head.size() < 3) throw IoError("csv container: header needs n,feature_dims,num_classes");
  ContainerRows rows;
  std::size_t n = 0;
  try {
    n = std::stoul(head[0]);
    rows.feature_dims = std::stoul(head[1]);
    rows.num_classes = std::stoul(head[2]);
  } catch (const std::exception&) {
    throw IoError("csv container: malformed header '" + line + "'");
  }
  const bool with_task = head.size() > 3 && head[3] == "task_id";
  rows.features = Tensor({n, rows.feature_dims});
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::getline(is, line)) throw IoError("csv container: expected " + std::to_string(n) + " rows");
    std::stringstream ss(line);
    std::string f;
    std::vector<double> vals;
    while (std::getline(ss, f, ',')) vals.push_back(std::stod(f));
    const std::size_t lead = with_task ? 2 : 1;
    if (vals.size() != lead + rows.feature_dims)
      throw IoError("csv container: row " + std::to_string(i) + " has " + std::to_string(vals.size()) + " fields");
    rows.labels.push_back(static_cast<int>(vals[0]));
    if (with_task) rows.task_ids.push_back(static_cast<int>(vals[1]));
    std::copy(vals.begin() + static_cast<std::ptrdiff_t>(lead), vals.end(), rows.features.row(i).begin());
  }
  return rows;
}

inline bool has_suffix(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

inline void save_dataset(const std::string& path, const Dataset& ds) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path);
  ContainerRows rows{ds.feature_dim(), ds.num_classes, ds.features, ds.labels, {}};
  if (has_suffix(path, ".csv"))
    write_container_csv(os, rows);
  else
    write_container(os, rows);
}

// Loads a container file (".csv" suffix selects the text form). Rows are
// flat; pass an image shape to reinterpret them.
inline Dataset load_dataset(const std::string& path, Shape feature_shape = {}) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read " + path);
  ContainerRows rows = has_suffix(path, ".csv") ? read_container_csv(is) : read_container(is);
  Dataset ds;
  ds.feature_shape = feature_shape.empty() ? Shape{rows.feature_dims} : std::move(feature_shape);
  if (ds.feature_dim() != rows.feature_dims) throw ConfigError("dataset shape does not match file feature_dims");
  ds.num_classes = rows.num_classes;
  ds.features = std::move(rows.features);
  ds.labels = std::move(rows.labels);
  ds.validate();
  return ds;
}

}  // namespace wscl
