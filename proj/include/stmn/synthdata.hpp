#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "stmn/head.hpp"
#include "stmn/tensor.hpp"

namespace stmn {

inline constexpr int kNumClasses = 4;

// Target shapes; class_id = index + 1.
enum class ShapeKind { square = 0, disk = 1, triangle = 2, cross = 3 };
// Static clutter shapes that never carry a label.
enum class DistractorKind { ring, bar };

using Color = std::array<double, 3>;

struct ObjectSpec {
  int class_id = 1;
  double size = 12.0;          // side of the bounding square in pixels
  double x = 0.0, y = 0.0;     // top-left corner at rendered time 0
  double vx = 0.0, vy = 0.0;   // pixels per rendered frame
  double jitter = 0.0;         // per-frame positional jitter amplitude
  Color color{0.9, 0.2, 0.2};
  bool operator==(const ObjectSpec&) const = default;
};

// Frame intervals are [begin, end) in output frames.
struct OcclusionEvent {
  std::size_t object = 0;
  std::size_t begin = 0, end = 0;
  double coverage = 0.6;  // minimum fraction of the object's pixels hidden
  Color color{0.3, 0.3, 0.35};
  bool operator==(const OcclusionEvent&) const = default;
};

struct BlurEvent {
  std::size_t object = 0;
  std::size_t begin = 0, end = 0;
  std::size_t length = 3;  // line kernel taps along the motion direction
  bool operator==(const BlurEvent&) const = default;
};

struct DistractorSpec {
  DistractorKind kind = DistractorKind::ring;
  double x = 0.0, y = 0.0, size = 10.0;
  Color color{0.5, 0.5, 0.5};
  std::size_t appear = 0;  // first output frame in which it is drawn
  bool operator==(const DistractorSpec&) const = default;
};

struct SequenceSpec {
  std::size_t height = 48, width = 48;
  std::size_t frames = 20;        // output frames
  std::size_t sample_stride = 1;  // rendered frames between consecutive output frames
  std::vector<ObjectSpec> objects;
  std::vector<OcclusionEvent> occlusions;
  std::vector<BlurEvent> blurs;
  std::vector<DistractorSpec> distractors;
  double background = 0.35;
  double noise = 0.04;
  std::uint64_t seed = 0;

  bool operator==(const SequenceSpec&) const = default;
  // Throws SpecError when the spec cannot be rendered as stated.
  void validate() const;
};

struct GroundTruth {
  Box box;
  int class_id = 0;
  bool occluded = false;
  bool operator==(const GroundTruth&) const = default;
};

struct SyntheticSequence {
  std::vector<Tensor<float>> frames;        // H x W x 3 in [0, 1]
  std::vector<std::vector<GroundTruth>> gt;  // per frame, one entry per object
  std::size_t length() const { return frames.size(); }
};

// Unclipped box of an object at an output frame, jitter included.
Box object_box(const SequenceSpec& spec, std::size_t object, std::size_t frame);

SyntheticSequence generate_sequence(const SequenceSpec& spec);

struct DatasetConfig {
  std::size_t height = 48, width = 48;
  std::size_t frames = 20;
  std::size_t sample_stride = 10;
  std::size_t max_objects = 2;
  double min_size = 10.0, max_size = 15.0;
  double min_speed = 1.5, max_speed = 4.0;  // pixels per output frame
  double occlusion_prob = 0.8;
  std::size_t min_occlusion = 3, max_occlusion = 6;
  double min_coverage = 0.65, max_coverage = 0.95;
  double blur_prob = 0.3;
  std::size_t max_distractors = 4;
};

// A randomized spec drawn from cfg; pure function of seed.
SequenceSpec random_sequence_spec(std::uint64_t seed, const DatasetConfig& cfg);

// A single object moving in a straight line without events, for alignment studies.
SequenceSpec translating_sequence_spec(std::uint64_t seed, const DatasetConfig& cfg);

struct DatasetEntry {
  std::string id;
  SequenceSpec spec;
  SyntheticSequence sequence;
};

struct Dataset {
  std::uint64_t seed = 0;
  DatasetConfig config;
  std::vector<DatasetEntry> train;
  std::vector<DatasetEntry> val;
};

// Train sequence i draws spec seed derive_seed(seed, 2i), val sequence i derive_seed(seed, 2i + 1).
Dataset make_dataset(std::size_t n_train, std::size_t n_val, std::uint64_t seed,
                     const DatasetConfig& cfg = {});

// Writes manifest.json plus one frame tensor (T x H x W x 3, f32) and one gt JSON per sequence.
void save_dataset(const Dataset& ds, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

void build_dataset(const std::filesystem::path& dir, std::size_t n_train, std::size_t n_val,
                   std::uint64_t seed, const DatasetConfig& cfg = {});

// Binary PPM (P6) of an H x W x 3 image in [0, 1]; single-channel images are written as gray.
void write_ppm(const std::filesystem::path& path, const Tensor<float>& image);
// Box outline of the given color, one pixel wide, clipped to the image.
void draw_box(Tensor<float>& image, const Box& box, const Color& color);

}  // namespace stmn
