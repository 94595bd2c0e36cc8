#include "detq/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "detq/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace detq {

namespace {

constexpr int kDatasetFormatVersion = 1;

struct ShapeDraw {
  int cls;
  double cx, cy, size;  // size = bounding-box side
  double color[3];
};

Box shape_box(const ShapeDraw& s) {
  Box b;
  b.x1 = s.cx - s.size / 2;
  b.y1 = s.cy - s.size / 2;
  b.x2 = s.cx + s.size / 2;
  b.y2 = s.cy + s.size / 2;
  b.class_id = s.cls;
  return b;
}

bool inside_shape(const ShapeDraw& s, double px, double py) {
  double dx = px - s.cx;
  double dy = py - s.cy;
  double half = s.size / 2;
  switch (s.cls) {
    case 0:  // circle
      return dx * dx + dy * dy <= half * half;
    case 1:  // square
      return std::fabs(dx) <= half && std::fabs(dy) <= half;
    default: {  // upright triangle, apex at the top
      if (dy < -half || dy > half) return false;
      double t = (dy + half) / s.size;  // 0 at apex row, 1 at base
      return std::fabs(dx) <= t * half;
    }
  }
}

double snap8(double v) { return std::nearbyint(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

}  // namespace

LabeledImage render_scene(const SceneSpec& spec, uint64_t image_seed) {
  DETQ_CHECK(spec.max_size + 2 * spec.margin <= spec.canvas,
             "render_scene: max shape size " << spec.max_size << " cannot fit in canvas "
                                             << spec.canvas);
  DETQ_CHECK(spec.min_shapes >= 1 && spec.max_shapes >= spec.min_shapes,
             "render_scene: bad shape count range");
  Rng rng(image_seed);
  const int S = spec.canvas;

  // textured background: per-image base color plus per-pixel noise
  double base[3] = {rng.uniform(0.08, 0.4), rng.uniform(0.08, 0.4), rng.uniform(0.08, 0.4)};
  LabeledImage img;
  img.pixels.assign(size_t(3) * S * S, 0.0);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < S; ++y)
      for (int x = 0; x < S; ++x)
        img.pixels[size_t((c * S + y) * S + x)] =
            base[c] + rng.uniform(-spec.noise_amp, spec.noise_amp);

  static const double kClassColor[3][3] = {
      {0.85, 0.25, 0.22},  // circle: red
      {0.22, 0.82, 0.28},  // square: green
      {0.25, 0.38, 0.88},  // triangle: blue
  };

  int want = int(rng.uniform_int(spec.min_shapes, spec.max_shapes));
  std::vector<ShapeDraw> shapes;
  for (int k = 0; k < want; ++k) {
    for (int attempt = 0; attempt < 40; ++attempt) {
      ShapeDraw s;
      s.cls = int(rng.uniform_int(0, kNumShapeClasses - 1));
      s.size = rng.uniform(spec.min_size, spec.max_size);
      double lo = spec.margin + s.size / 2;
      double hi = S - spec.margin - s.size / 2;
      s.cx = rng.uniform(lo, hi);
      s.cy = rng.uniform(lo, hi);
      double bright = rng.uniform(0.7, 1.35);
      for (int c = 0; c < 3; ++c)
        s.color[c] = kClassColor[s.cls][c] * bright +
                     rng.uniform(-spec.color_jitter, spec.color_jitter);
      bool ok = true;
      for (const auto& other : shapes)
        if (iou(shape_box(s), shape_box(other)) > 0.25) ok = false;
      if (!ok) continue;
      shapes.push_back(s);
      break;
    }
  }
  DETQ_CHECK(!shapes.empty(), "render_scene: failed to place any shape");

  for (const auto& s : shapes) {
    Box b = shape_box(s);
    int x_lo = std::max(0, int(std::floor(b.x1)));
    int x_hi = std::min(S - 1, int(std::ceil(b.x2)));
    int y_lo = std::max(0, int(std::floor(b.y1)));
    int y_hi = std::min(S - 1, int(std::ceil(b.y2)));
    for (int y = y_lo; y <= y_hi; ++y)
      for (int x = x_lo; x <= x_hi; ++x)
        if (inside_shape(s, x + 0.5, y + 0.5))
          for (int c = 0; c < 3; ++c) img.pixels[size_t((c * S + y) * S + x)] = s.color[c];
    img.boxes.push_back(b);
  }

  // snap to the 8-bit grid so in-memory pixels match a PPM round trip
  for (double& v : img.pixels) v = snap8(v);
  return img;
}

Dataset generate_dataset(const SceneSpec& spec, int n_images, uint64_t seed) {
  DETQ_CHECK(n_images >= 1, "generate_dataset: need at least one image, got " << n_images);
  Dataset ds;
  ds.canvas = spec.canvas;
  ds.images.reserve(size_t(n_images));
  for (int i = 0; i < n_images; ++i)
    ds.images.push_back(render_scene(spec, derive_seed(seed, "image", uint64_t(i))));
  return ds;
}

namespace {

void write_ppm(const std::string& path, const std::vector<double>& chw, int S) {
  std::ofstream f(path, std::ios::binary);
  DETQ_CHECK(f.good(), "cannot open " << path << " for writing");
  f << "P6\n" << S << " " << S << "\n255\n";
  std::vector<unsigned char> row(size_t(S) * 3);
  for (int y = 0; y < S; ++y) {
    for (int x = 0; x < S; ++x)
      for (int c = 0; c < 3; ++c)
        row[size_t(x * 3 + c)] =
            (unsigned char)std::lround(std::clamp(chw[size_t((c * S + y) * S + x)], 0.0, 1.0) * 255.0);
    f.write(reinterpret_cast<const char*>(row.data()), std::streamsize(row.size()));
  }
  DETQ_CHECK(f.good(), "write failed for " << path);
}

std::vector<double> read_ppm(const std::string& path, int* out_size) {
  std::ifstream f(path, std::ios::binary);
  DETQ_CHECK(f.good(), "cannot open " << path);
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  f >> magic >> w >> h >> maxval;
  DETQ_CHECK(magic == "P6", path << ": not a P6 ppm");
  DETQ_CHECK(w == h && w > 0, path << ": expected square image, got " << w << "x" << h);
  DETQ_CHECK(maxval == 255, path << ": unsupported maxval " << maxval);
  f.get();  // single whitespace after header
  std::vector<unsigned char> raw(size_t(w) * h * 3);
  f.read(reinterpret_cast<char*>(raw.data()), std::streamsize(raw.size()));
  DETQ_CHECK(f.gcount() == std::streamsize(raw.size()), path << ": truncated pixel data");
  std::vector<double> chw(raw.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        chw[size_t((c * h + y) * w + x)] = double(raw[size_t((y * w + x) * 3 + c)]) / 255.0;
  *out_size = w;
  return chw;
}

std::string image_name(int i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "img_%06d.ppm", i);
  return buf;
}

}  // namespace

void save_dataset(const Dataset& ds, const std::string& dir, const SceneSpec& spec,
                  uint64_t seed) {
  fs::create_directories(dir);
  json meta = {
      {"format_version", kDatasetFormatVersion},
      {"canvas", ds.canvas},
      {"n_images", ds.images.size()},
      {"seed", seed},
      {"scene",
       {{"min_shapes", spec.min_shapes},
        {"max_shapes", spec.max_shapes},
        {"min_size", spec.min_size},
        {"max_size", spec.max_size},
        {"color_jitter", spec.color_jitter},
        {"noise_amp", spec.noise_amp},
        {"margin", spec.margin}}},
  };
  std::ofstream mf(dir + "/meta.json");
  mf << meta.dump(2) << "\n";
  DETQ_CHECK(mf.good(), "failed writing " << dir << "/meta.json");

  std::ofstream af(dir + "/annotations.jsonl");
  for (size_t i = 0; i < ds.images.size(); ++i) {
    write_ppm(dir + "/" + image_name(int(i)), ds.images[i].pixels, ds.canvas);
    json rec;
    rec["image_id"] = i;
    rec["boxes"] = json::array();
    for (const auto& b : ds.images[i].boxes)
      rec["boxes"].push_back(
          {{"x1", b.x1}, {"y1", b.y1}, {"x2", b.x2}, {"y2", b.y2}, {"class_id", b.class_id}});
    af << rec.dump() << "\n";
  }
  DETQ_CHECK(af.good(), "failed writing " << dir << "/annotations.jsonl");
}

namespace {

json load_meta(const std::string& dir) {
  std::ifstream mf(dir + "/meta.json");
  DETQ_CHECK(mf.good(), "missing " << dir << "/meta.json");
  json meta = json::parse(mf, nullptr, /*allow_exceptions=*/false);
  DETQ_CHECK(!meta.is_discarded(), dir << "/meta.json is not valid JSON");
  DETQ_CHECK(meta.value("format_version", -1) == kDatasetFormatVersion,
             dir << ": unsupported dataset format version");
  return meta;
}

}  // namespace

Dataset load_dataset(const std::string& dir) {
  json meta = load_meta(dir);
  int n = meta.at("n_images").get<int>();
  Dataset ds;
  ds.canvas = meta.at("canvas").get<int>();
  ds.images.resize(size_t(n));
  std::ifstream af(dir + "/annotations.jsonl");
  DETQ_CHECK(af.good(), "missing " << dir << "/annotations.jsonl");
  std::string line;
  int count = 0;
  while (std::getline(af, line)) {
    if (line.empty()) continue;
    json rec = json::parse(line, nullptr, false);
    DETQ_CHECK(!rec.is_discarded(), dir << ": bad annotation line " << count);
    int id = rec.at("image_id").get<int>();
    DETQ_CHECK(id >= 0 && id < n, dir << ": annotation image_id " << id << " out of range");
    for (const auto& jb : rec.at("boxes")) {
      Box b;
      b.x1 = jb.at("x1").get<double>();
      b.y1 = jb.at("y1").get<double>();
      b.x2 = jb.at("x2").get<double>();
      b.y2 = jb.at("y2").get<double>();
      b.class_id = jb.at("class_id").get<int>();
      ds.images[size_t(id)].boxes.push_back(b);
    }
    ++count;
  }
  for (int i = 0; i < n; ++i) {
    int sz = 0;
    ds.images[size_t(i)].pixels = read_ppm(dir + "/" + image_name(i), &sz);
    DETQ_CHECK(sz == ds.canvas, dir << ": image " << i << " size mismatch");
  }
  return ds;
}

CalibrationSet load_calibration(const std::string& dir, int max_images) {
  json meta = load_meta(dir);
  int n = meta.at("n_images").get<int>();
  if (max_images > 0) n = std::min(n, max_images);
  CalibrationSet cs;
  cs.canvas = meta.at("canvas").get<int>();
  for (int i = 0; i < n; ++i) {
    int sz = 0;
    cs.images.push_back(read_ppm(dir + "/" + image_name(i), &sz));
    DETQ_CHECK(sz == cs.canvas, dir << ": image " << i << " size mismatch");
  }
  return cs;
}

CalibrationSet to_calibration(const Dataset& ds, int max_images) {
  CalibrationSet cs;
  cs.canvas = ds.canvas;
  size_t n = ds.images.size();
  if (max_images > 0) n = std::min(n, size_t(max_images));
  for (size_t i = 0; i < n; ++i) cs.images.push_back(ds.images[i].pixels);
  return cs;
}

}  // namespace detq
