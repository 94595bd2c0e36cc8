#pragma once

#include <string>
#include <vector>

#include "detq/boxes.hpp"

namespace detq {

// Scene recipe for the synthetic shapes dataset. Shapes are solid circles,
// squares and upright triangles (class ids 0/1/2) on a noisy background;
// ground-truth boxes are exact shape bounds.
struct SceneSpec {
  int canvas = 64;
  int min_shapes = 1;
  int max_shapes = 3;
  double min_size = 14.0;   // bounding-box side, pixels
  double max_size = 32.0;
  double color_jitter = 0.12;
  double noise_amp = 0.06;
  double margin = 2.0;      // min distance from the canvas edge
};

inline constexpr int kNumShapeClasses = 3;

struct LabeledImage {
  std::vector<double> pixels;  // CHW, 3 channels, values on the 8-bit grid
  std::vector<Box> boxes;      // class_id set, score unused
};

struct Dataset {
  int canvas = 64;
  std::vector<LabeledImage> images;
};

// Images only; carries no ground truth by construction. Quantization
// calibration consumes this type, never Dataset.
struct CalibrationSet {
  static constexpr bool kLabelFree = true;
  int canvas = 64;
  std::vector<std::vector<double>> images;  // CHW pixel buffers
};

LabeledImage render_scene(const SceneSpec& spec, uint64_t image_seed);
Dataset generate_dataset(const SceneSpec& spec, int n_images, uint64_t seed);

// On-disk layout: meta.json + img_%06d.ppm (P6) + annotations.jsonl with one
// {image_id, boxes:[...]} record per image.
void save_dataset(const Dataset& ds, const std::string& dir, const SceneSpec& spec,
                  uint64_t seed);
Dataset load_dataset(const std::string& dir);
CalibrationSet load_calibration(const std::string& dir, int max_images = 0);

CalibrationSet to_calibration(const Dataset& ds, int max_images = 0);

}  // namespace detq
