#pragma once

// Task generation and ingestion: procedurally drawn glyph images, rotated and
// class-split task families, label shuffling, and IDX (MNIST) file I/O.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "ctl/errors.hpp"
#include "ctl/nncore.hpp"
#include "ctl/rng.hpp"

namespace ctl {

enum class Split { train, test };

inline std::string to_string(Split s) { return s == Split::train ? "train" : "test"; }

struct LabeledDataset {
  Matrix inputs;            // d_0 x n, one column per sample
  std::vector<int> labels;  // n entries in [0, num_classes)
  int num_classes = 0;
  std::string task_id;
  Split split = Split::train;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t input_dim() const noexcept { return static_cast<std::size_t>(inputs.rows()); }

  void validate() const {
    if (labels.empty()) throw ValidationError("dataset '" + task_id + "' is empty");
    if (static_cast<std::size_t>(inputs.cols()) != labels.size())
      throw ShapeError("dataset '" + task_id + "': input columns differ from label count");
    if (num_classes < 1) throw ValidationError("dataset '" + task_id + "': num_classes must be positive");
    for (int y : labels)
      if (y < 0 || y >= num_classes)
        throw ValidationError("dataset '" + task_id + "': label " + std::to_string(y) + " out of range");
    if (!inputs.allFinite()) throw ValidationError("dataset '" + task_id + "': non-finite inputs");
  }

  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> counts(static_cast<std::size_t>(std::max(num_classes, 0)), 0);
    for (int y : labels) ++counts[static_cast<std::size_t>(y)];
    return counts;
  }
};

/// Union of two datasets over the same label space (columns of `a` first).
inline LabeledDataset concat(const LabeledDataset& a, const LabeledDataset& b) {
  if (a.inputs.rows() != b.inputs.rows()) throw ShapeError("concat: input dims differ");
  if (a.num_classes != b.num_classes) throw ValidationError("concat: label spaces differ");
  LabeledDataset out;
  out.inputs.resize(a.inputs.rows(), a.inputs.cols() + b.inputs.cols());
  out.inputs << a.inputs, b.inputs;
  out.labels = a.labels;
  out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
  out.num_classes = a.num_classes;
  out.task_id = a.task_id + "+" + b.task_id;
  out.split = a.split;
  return out;
}

/// First `n` samples (or all, if fewer).
inline LabeledDataset head(const LabeledDataset& d, std::size_t n) {
  n = std::min(n, d.size());
  LabeledDataset out;
  out.inputs = d.inputs.leftCols(static_cast<Eigen::Index>(n));
  out.labels.assign(d.labels.begin(), d.labels.begin() + static_cast<std::ptrdiff_t>(n));
  out.num_classes = d.num_classes;
  out.task_id = d.task_id + "|head" + std::to_string(n);
  out.split = d.split;
  return out;
}

struct TaskRecipe {
  enum class Kind { rotated, split_classes, shuffled_labels, idx_files };
  Kind kind = Kind::rotated;
  double angle_degrees = 0.0;
  int class_lo = 0, class_hi = 0;  // inclusive window
  std::uint64_t shuffle_seed = 0;
  std::string images_path, labels_path;
  std::uint64_t base_seed = 0;

  void validate() const {
    if (kind == Kind::rotated && !(angle_degrees >= 0.0 && angle_degrees < 360.0))
      throw ValidationError("task recipe: rotation angle must lie in [0, 360)");
    if (kind == Kind::split_classes && (class_lo < 0 || class_hi < class_lo))
      throw ValidationError("task recipe: empty or negative class window");
  }
};

// ---------------------------------------------------------------------------
// Synthetic glyphs

namespace detail {

struct Point {
  double x, y;
};

// 3x3 anchor lattice inside the unit square (y grows downward). Kept within the
// inscribed circle so rotations do not clip strokes.
inline constexpr std::array<Point, 9> kAnchors{{{0.30, 0.24},
                                                {0.50, 0.24},
                                                {0.70, 0.24},
                                                {0.30, 0.50},
                                                {0.50, 0.50},
                                                {0.70, 0.50},
                                                {0.30, 0.76},
                                                {0.50, 0.76},
                                                {0.70, 0.76}}};

// Sixteen strokes between anchors: outline halves, middle bar halves,
// centre verticals and the four diagonals.
inline constexpr std::array<std::pair<int, int>, 16> kStrokes{{{0, 1},
                                                               {1, 2},
                                                               {0, 3},
                                                               {2, 5},
                                                               {3, 4},
                                                               {4, 5},
                                                               {3, 6},
                                                               {5, 8},
                                                               {6, 7},
                                                               {7, 8},
                                                               {1, 4},
                                                               {4, 7},
                                                               {0, 4},
                                                               {2, 4},
                                                               {6, 4},
                                                               {8, 4}}};

inline std::vector<int> glyph_strokes(int cls) {
  static const std::array<std::vector<int>, 10> digits{{
      {0, 1, 2, 3, 6, 7, 8, 9},
      {10, 11, 13},
      {0, 1, 3, 4, 5, 6, 8, 9},
      {0, 1, 3, 5, 7, 8, 9},
      {2, 3, 4, 5, 7},
      {0, 1, 2, 4, 5, 7, 8, 9},
      {0, 1, 2, 4, 5, 6, 7, 8, 9},
      {0, 1, 13, 14},
      {0, 1, 2, 3, 4, 5, 6, 7, 8, 9},
      {0, 1, 2, 3, 4, 5, 7},
  }};
  if (cls < 10) return digits[static_cast<std::size_t>(cls)];
  // Beyond ten classes: a fixed pseudo-random subset of 5..9 strokes.
  Rng rng(derive_seed(0x6c79706873ULL, static_cast<std::uint64_t>(cls)));
  std::array<int, 16> order{};
  for (int i = 0; i < 16; ++i) order[static_cast<std::size_t>(i)] = i;
  rng.shuffle(std::span<int>(order));
  const auto count = 5 + static_cast<int>(rng.below(5));
  std::vector<int> out(order.begin(), order.begin() + count);
  std::sort(out.begin(), out.end());
  return out;
}

inline double segment_distance(Point p, Point a, Point b) {
  const double vx = b.x - a.x, vy = b.y - a.y;
  const double wx = p.x - a.x, wy = p.y - a.y;
  const double len2 = vx * vx + vy * vy;
  double t = len2 > 0 ? (wx * vx + wy * vy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double dx = wx - t * vx, dy = wy - t * vy;
  return std::sqrt(dx * dx + dy * dy);
}

/// Renders one jittered, noisy glyph into `out` (grid*grid, row-major).
inline void render_glyph(int cls, int grid, double noise_sigma, Rng& rng, Eigen::Ref<Vector> out) {
  const double scale = rng.uniform(0.85, 1.1);
  const double tilt = rng.uniform(-0.15, 0.15);
  const double shift_x = rng.uniform(-0.06, 0.06), shift_y = rng.uniform(-0.06, 0.06);
  const double width = rng.uniform(0.05, 0.085);
  const double ink = rng.uniform(0.75, 1.0);
  const double ct = std::cos(tilt), st = std::sin(tilt);

  std::array<Point, 9> anchors{};
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    const double x = kAnchors[i].x - 0.5 + rng.uniform(-0.025, 0.025);
    const double y = kAnchors[i].y - 0.5 + rng.uniform(-0.025, 0.025);
    anchors[i] = {0.5 + shift_x + scale * (ct * x - st * y), 0.5 + shift_y + scale * (st * x + ct * y)};
  }
  const auto strokes = glyph_strokes(cls);
  const double g = static_cast<double>(grid);
  for (int r = 0; r < grid; ++r) {
    for (int c = 0; c < grid; ++c) {
      const Point p{(c + 0.5) / g, (r + 0.5) / g};
      double d = 1e9;
      for (int s : strokes) {
        const auto [ia, ib] = kStrokes[static_cast<std::size_t>(s)];
        d = std::min(d, segment_distance(p, anchors[static_cast<std::size_t>(ia)],
                                         anchors[static_cast<std::size_t>(ib)]));
      }
      // One-pixel linear falloff at the stroke boundary.
      const double v = ink * std::clamp(0.5 + (0.5 * width - d) * g, 0.0, 1.0);
      out[r * grid + c] = v;
    }
  }
  if (noise_sigma > 0.0)
    for (Eigen::Index i = 0; i < out.size(); ++i) out[i] = std::clamp(out[i] + noise_sigma * rng.normal(), 0.0, 1.0);
}

}  // namespace detail

struct SyntheticOptions {
  int grid = 16;
  int num_classes = 10;
  double noise_sigma = 0.1;
};

/// Train/test pair of grid x grid glyph images, balanced over classes up to
/// remainder, in seeded random order. Deterministic in all arguments.
inline std::pair<LabeledDataset, LabeledDataset> generate_synthetic_base(std::uint64_t seed, std::size_t n_train,
                                                                         std::size_t n_test,
                                                                         const SyntheticOptions& opts = {}) {
  if (opts.grid < 2) throw ValidationError("synthetic base: grid must be at least 2");
  if (opts.num_classes < 2) throw ValidationError("synthetic base: num_classes must be at least 2");
  if (n_train == 0 || n_test == 0) throw ValidationError("synthetic base: sample counts must be positive");
  if (!(opts.noise_sigma >= 0.0)) throw ValidationError("synthetic base: noise must be non-negative");

  auto make = [&](std::size_t n, Split split, std::uint64_t stream) {
    LabeledDataset d;
    d.num_classes = opts.num_classes;
    d.split = split;
    d.task_id = "glyphs(seed=" + std::to_string(seed) + ",grid=" + std::to_string(opts.grid) +
                ",c=" + std::to_string(opts.num_classes) + ")/" + to_string(split);
    d.inputs.resize(opts.grid * opts.grid, static_cast<Eigen::Index>(n));
    d.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) d.labels[i] = static_cast<int>(i % static_cast<std::size_t>(opts.num_classes));
    Rng order(derive_seed(seed, stream));
    order.shuffle(std::span<int>(d.labels));
    Rng ink(derive_seed(seed, stream + 1));
    for (std::size_t i = 0; i < n; ++i)
      detail::render_glyph(d.labels[i], opts.grid, opts.noise_sigma, ink, d.inputs.col(static_cast<Eigen::Index>(i)));
    return d;
  };
  return {make(n_train, Split::train, 10), make(n_test, Split::test, 20)};
}

// ---------------------------------------------------------------------------
// Transforms

namespace detail {

inline int square_side(std::size_t d0) {
  const auto side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(d0))));
  if (side <= 0 || static_cast<std::size_t>(side) * static_cast<std::size_t>(side) != d0)
    throw ShapeError("rotate: input dim " + std::to_string(d0) + " is not a perfect square");
  return side;
}

/// cos/sin of an angle in degrees, exact at multiples of 90.
inline std::pair<double, double> cos_sin_degrees(double deg) {
  double a = std::fmod(deg, 360.0);
  if (a < 0) a += 360.0;
  if (a == 0.0) return {1.0, 0.0};
  if (a == 90.0) return {0.0, 1.0};
  if (a == 180.0) return {-1.0, 0.0};
  if (a == 270.0) return {0.0, -1.0};
  const double rad = a * std::numbers::pi / 180.0;
  return {std::cos(rad), std::sin(rad)};
}

}  // namespace detail

/// Rotates one side x side image (row-major) about its centre.
/// Positive angles turn the picture counter-clockwise as displayed (rows down).
/// Bilinear sampling; samples falling outside the source read as 0.
inline Vector rotate_image(const Vector& image, int side, double angle_degrees) {
  const auto [cs, sn] = detail::cos_sin_degrees(angle_degrees);
  const double centre = 0.5 * (side - 1);
  Vector out(image.size());
  auto at = [&](int r, int c) -> double {
    if (r < 0 || c < 0 || r >= side || c >= side) return 0.0;
    return image[r * side + c];
  };
  for (int r = 0; r < side; ++r) {
    for (int c = 0; c < side; ++c) {
      // Inverse map: output pixel -> source location.
      const double x = c - centre, y = centre - r;
      const double sx = cs * x + sn * y;
      const double sy = -sn * x + cs * y;
      const double src_c = sx + centre, src_r = centre - sy;
      const double fr = std::floor(src_r), fc = std::floor(src_c);
      const double tr = src_r - fr, tc = src_c - fc;
      const int r0 = static_cast<int>(fr), c0 = static_cast<int>(fc);
      double v = (1 - tr) * (1 - tc) * at(r0, c0);
      if (tc != 0.0) v += (1 - tr) * tc * at(r0, c0 + 1);
      if (tr != 0.0) v += tr * (1 - tc) * at(r0 + 1, c0);
      if (tr != 0.0 && tc != 0.0) v += tr * tc * at(r0 + 1, c0 + 1);
      out[r * side + c] = v;
    }
  }
  return out;
}

inline LabeledDataset rotate_dataset(const LabeledDataset& base, double angle_degrees) {
  if (!std::isfinite(angle_degrees)) throw ValidationError("rotate: non-finite angle");
  const int side = detail::square_side(base.input_dim());
  LabeledDataset out = base;
  for (Eigen::Index j = 0; j < base.inputs.cols(); ++j)
    out.inputs.col(j) = rotate_image(base.inputs.col(j), side, angle_degrees);
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", angle_degrees);
  out.task_id = base.task_id + "|rot" + buf;
  return out;
}

/// Keeps samples whose label lies in [lo, hi] and relabels them to [0, hi-lo].
inline LabeledDataset split_classes(const LabeledDataset& base, int lo, int hi) {
  if (lo < 0 || hi < lo || hi >= base.num_classes)
    throw ValidationError("split_classes: window [" + std::to_string(lo) + "," + std::to_string(hi) +
                          "] outside [0," + std::to_string(base.num_classes) + ")");
  std::vector<Eigen::Index> keep;
  for (std::size_t i = 0; i < base.labels.size(); ++i)
    if (base.labels[i] >= lo && base.labels[i] <= hi) keep.push_back(static_cast<Eigen::Index>(i));
  if (keep.empty()) throw ValidationError("split_classes: window selects no samples");
  LabeledDataset out;
  out.inputs.resize(base.inputs.rows(), static_cast<Eigen::Index>(keep.size()));
  out.labels.reserve(keep.size());
  for (std::size_t k = 0; k < keep.size(); ++k) {
    out.inputs.col(static_cast<Eigen::Index>(k)) = base.inputs.col(keep[k]);
    out.labels.push_back(base.labels[static_cast<std::size_t>(keep[k])] - lo);
  }
  out.num_classes = hi - lo + 1;
  out.split = base.split;
  out.task_id = base.task_id + "|classes" + std::to_string(lo) + "-" + std::to_string(hi);
  return out;
}

/// Uniformly random permutation of the label vector; inputs untouched.
inline LabeledDataset shuffle_labels(const LabeledDataset& base, std::uint64_t seed) {
  LabeledDataset out = base;
  Rng rng(seed);
  rng.shuffle(std::span<int>(out.labels));
  out.task_id = base.task_id + "|shuffled" + std::to_string(seed);
  return out;
}

// ---------------------------------------------------------------------------
// IDX files

namespace detail {

inline std::vector<unsigned char> read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IdxError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t off, const std::string& what) {
  if (b.size() < off + 4) throw IdxTruncatedError(what + ": truncated header");
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}

inline void put_be32(std::ofstream& out, std::uint32_t v) {
  const unsigned char bytes[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                                  static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<const char*>(bytes), 4);
}

}  // namespace detail

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

/// Parses an IDX image/label file pair. Pixels are scaled to [0,1] by /255.
/// `num_classes` <= 0 infers max(label)+1.
inline LabeledDataset read_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                               int num_classes = 0, Split split = Split::train) {
  const auto img = detail::read_all(images_path);
  const auto lab = detail::read_all(labels_path);
  const std::string iw = images_path.string(), lw = labels_path.string();

  if (detail::be32(img, 0, iw) != kIdxImagesMagic) throw IdxMagicError(iw + ": wrong magic for an IDX image file");
  if (detail::be32(lab, 0, lw) != kIdxLabelsMagic) throw IdxMagicError(lw + ": wrong magic for an IDX label file");
  const std::size_t n = detail::be32(img, 4, iw);
  const std::size_t rows = detail::be32(img, 8, iw);
  const std::size_t cols = detail::be32(img, 12, iw);
  const std::size_t n_labels = detail::be32(lab, 4, lw);
  if (n != n_labels)
    throw IdxCountMismatchError("IDX count mismatch: " + std::to_string(n) + " images vs " +
                                std::to_string(n_labels) + " labels");
  const std::size_t pixels = rows * cols;
  if (img.size() < 16 + n * pixels) throw IdxTruncatedError(iw + ": truncated pixel payload");
  if (lab.size() < 8 + n) throw IdxTruncatedError(lw + ": truncated label payload");
  if (n == 0 || pixels == 0) throw ValidationError("IDX files hold no samples");

  LabeledDataset d;
  d.inputs.resize(static_cast<Eigen::Index>(pixels), static_cast<Eigen::Index>(n));
  d.labels.resize(n);
  int max_label = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned char* px = img.data() + 16 + i * pixels;
    for (std::size_t p = 0; p < pixels; ++p)
      d.inputs(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(i)) = px[p] / 255.0;
    d.labels[i] = lab[8 + i];
    max_label = std::max(max_label, d.labels[i]);
  }
  d.num_classes = num_classes > 0 ? num_classes : max_label + 1;
  d.split = split;
  d.task_id = "idx(" + images_path.filename().string() + ")";
  d.validate();
  return d;
}

/// Writes `d` as an IDX pair; pixel values are stored as round(255*v) clamped to [0,255].
inline void write_idx(const LabeledDataset& d, const std::filesystem::path& images_path,
                      const std::filesystem::path& labels_path) {
  const int side = detail::square_side(d.input_dim());
  std::ofstream img(images_path, std::ios::binary);
  std::ofstream lab(labels_path, std::ios::binary);
  if (!img || !lab) throw IdxError("cannot open IDX output files");
  detail::put_be32(img, kIdxImagesMagic);
  detail::put_be32(img, static_cast<std::uint32_t>(d.size()));
  detail::put_be32(img, static_cast<std::uint32_t>(side));
  detail::put_be32(img, static_cast<std::uint32_t>(side));
  for (Eigen::Index j = 0; j < d.inputs.cols(); ++j)
    for (Eigen::Index p = 0; p < d.inputs.rows(); ++p) {
      const double v = std::clamp(std::round(d.inputs(p, j) * 255.0), 0.0, 255.0);
      img.put(static_cast<char>(static_cast<unsigned char>(v)));
    }
  detail::put_be32(lab, kIdxLabelsMagic);
  detail::put_be32(lab, static_cast<std::uint32_t>(d.size()));
  for (int y : d.labels) {
    if (y < 0 || y > 255) throw ValidationError("write_idx: label does not fit in a byte");
    lab.put(static_cast<char>(static_cast<unsigned char>(y)));
  }
}

/// Materializes a recipe against a base dataset (idx_files ignores `base`).
inline LabeledDataset apply_recipe(const TaskRecipe& recipe, const LabeledDataset& base) {
  recipe.validate();
  switch (recipe.kind) {
    case TaskRecipe::Kind::rotated:
      return rotate_dataset(base, recipe.angle_degrees);
    case TaskRecipe::Kind::split_classes:
      return split_classes(base, recipe.class_lo, recipe.class_hi);
    case TaskRecipe::Kind::shuffled_labels:
      return shuffle_labels(base, recipe.shuffle_seed);
    case TaskRecipe::Kind::idx_files:
      return read_idx(recipe.images_path, recipe.labels_path, base.num_classes, base.split);
  }
  throw ValidationError("unknown task recipe kind");
}

}  // namespace ctl
