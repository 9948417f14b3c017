#include "stmn/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <string>

#include <json.hpp>

#include "stmn/errors.hpp"
#include "stmn/random.hpp"
#include "stmn/tensor_io.hpp"

namespace stmn {

namespace {

using nlohmann::json;

constexpr int kSuper = 4;  // supersampling per axis

double jitter_offset(const SequenceSpec& spec, std::size_t object, std::size_t tau, int axis) {
  const double amp = spec.objects[object].jitter;
  if (amp == 0.0) return 0.0;
  Rng rng(derive_seed(derive_seed(spec.seed, 100 + object), 2 * tau + static_cast<std::size_t>(axis)));
  return std::uniform_real_distribution<double>(-amp, amp)(rng);
}

bool inside_shape(ShapeKind kind, double u, double v) {
  switch (kind) {
    case ShapeKind::square: return true;
    case ShapeKind::disk: return (u - 0.5) * (u - 0.5) + (v - 0.5) * (v - 0.5) <= 0.25;
    case ShapeKind::triangle: return std::abs(u - 0.5) <= 0.5 * v;
    case ShapeKind::cross: return std::abs(u - 0.5) <= 1.0 / 6.0 || std::abs(v - 0.5) <= 1.0 / 6.0;
  }
  return false;
}

bool inside_distractor(DistractorKind kind, double u, double v) {
  if (kind == DistractorKind::bar) return std::abs(v - 0.5) <= 0.1;
  const double r2 = (u - 0.5) * (u - 0.5) + (v - 0.5) * (v - 0.5);
  return r2 <= 0.25 && r2 >= 0.09;
}

// Fractional coverage of each pixel by a shape occupying box b, via kSuper^2 samples.
template <typename Inside>
std::vector<double> coverage_map(const Box& b, std::size_t H, std::size_t W, Inside&& inside) {
  std::vector<double> alpha(H * W, 0.0);
  const long y0 = std::max(0L, static_cast<long>(std::floor(b.y1)));
  const long y1 = std::min(static_cast<long>(H), static_cast<long>(std::ceil(b.y2)));
  const long x0 = std::max(0L, static_cast<long>(std::floor(b.x1)));
  const long x1 = std::min(static_cast<long>(W), static_cast<long>(std::ceil(b.x2)));
  const double bw = b.width(), bh = b.height();
  for (long y = y0; y < y1; ++y) {
    for (long x = x0; x < x1; ++x) {
      int hits = 0;
      for (int sy = 0; sy < kSuper; ++sy) {
        for (int sx = 0; sx < kSuper; ++sx) {
          const double py = static_cast<double>(y) + (sy + 0.5) / kSuper;
          const double px = static_cast<double>(x) + (sx + 0.5) / kSuper;
          if (py < b.y1 || py >= b.y2 || px < b.x1 || px >= b.x2) continue;
          if (inside((px - b.x1) / bw, (py - b.y1) / bh)) ++hits;
        }
      }
      alpha[static_cast<std::size_t>(y) * W + static_cast<std::size_t>(x)] =
          static_cast<double>(hits) / (kSuper * kSuper);
    }
  }
  return alpha;
}

std::vector<double> line_blur(const std::vector<double>& src, std::size_t H, std::size_t W,
                              std::size_t taps, double dx, double dy) {
  std::vector<double> out(src.size(), 0.0);
  const double half = (static_cast<double>(taps) - 1.0) / 2.0;
  for (std::size_t k = 0; k < taps; ++k) {
    const double s = static_cast<double>(k) - half;
    const long oy = std::lround(s * dy), ox = std::lround(s * dx);
    for (std::size_t y = 0; y < H; ++y) {
      const long sy = static_cast<long>(y) - oy;
      if (sy < 0 || sy >= static_cast<long>(H)) continue;
      for (std::size_t x = 0; x < W; ++x) {
        const long sx = static_cast<long>(x) - ox;
        if (sx < 0 || sx >= static_cast<long>(W)) continue;
        out[y * W + x] += src[static_cast<std::size_t>(sy) * W + static_cast<std::size_t>(sx)];
      }
    }
  }
  for (double& v : out) v /= static_cast<double>(taps);
  return out;
}

void composite(std::vector<double>& img, const std::vector<double>& alpha,
               const std::vector<double>& premult, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      img[3 * i + c] = img[3 * i + c] * (1.0 - alpha[i]) + premult[3 * i + c];
    }
  }
}

struct PixelRect {
  std::size_t r0 = 0, r1 = 0, c0 = 0, c1 = 0;
  bool contains(std::size_t r, std::size_t c) const { return r >= r0 && r < r1 && c >= c0 && c < c1; }
};

// Grows a rectangle from one side of the object's pixel extent until it hides at least
// `coverage` of the object's nonzero pixels.
PixelRect place_occluder(const std::vector<double>& alpha, std::size_t H, std::size_t W,
                         double coverage, int side) {
  std::size_t r0 = H, r1 = 0, c0 = W, c1 = 0, total = 0;
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      if (alpha[y * W + x] <= 0.0) continue;
      ++total;
      r0 = std::min(r0, y); r1 = std::max(r1, y + 1);
      c0 = std::min(c0, x); c1 = std::max(c1, x + 1);
    }
  }
  if (total == 0) return {};
  const bool horizontal = side < 2;
  const std::size_t span = horizontal ? c1 - c0 : r1 - r0;
  for (std::size_t e = 1; e <= span; ++e) {
    PixelRect rect{r0, r1, c0, c1};
    if (side == 0) rect.c1 = c0 + e;
    if (side == 1) rect.c0 = c1 - e;
    if (side == 2) rect.r1 = r0 + e;
    if (side == 3) rect.r0 = r1 - e;
    std::size_t hidden = 0;
    for (std::size_t y = rect.r0; y < rect.r1; ++y)
      for (std::size_t x = rect.c0; x < rect.c1; ++x) hidden += alpha[y * W + x] > 0.0;
    if (static_cast<double>(hidden) >= coverage * static_cast<double>(total)) return rect;
  }
  return {r0, r1, c0, c1};
}

double clamp01(double v) { return std::min(1.0, std::max(0.0, v)); }

}  // namespace

Box object_box(const SequenceSpec& spec, std::size_t object, std::size_t frame) {
  const ObjectSpec& o = spec.objects.at(object);
  const std::size_t tau = frame * spec.sample_stride;
  const double t = static_cast<double>(tau);
  const double x = o.x + o.vx * t + jitter_offset(spec, object, tau, 0);
  const double y = o.y + o.vy * t + jitter_offset(spec, object, tau, 1);
  return {x, y, x + o.size, y + o.size};
}

void SequenceSpec::validate() const {
  if (height < 8 || width < 8) throw SpecError("image must be at least 8x8");
  if (frames == 0 || sample_stride == 0) throw SpecError("frames and sample_stride must be positive");
  if (background < 0.0 || background > 1.0 || noise < 0.0) throw SpecError("bad background or noise");
  for (std::size_t i = 0; i < objects.size(); ++i) {
    const auto& o = objects[i];
    if (o.class_id < 1 || o.class_id > kNumClasses) throw SpecError("class_id out of range");
    if (!(o.size > 0.0) || o.jitter < 0.0) throw SpecError("object size must be positive");
    for (std::size_t t = 0; t < frames; ++t) {
      const Box b = object_box(*this, i, t);
      const Box c = clip_box(b, static_cast<double>(width), static_cast<double>(height));
      if (c.area() < 0.5 * b.area() || !c.valid()) {
        throw SpecError("object " + std::to_string(i) + " leaves the frame at frame " + std::to_string(t));
      }
    }
  }
  for (const auto& e : occlusions) {
    if (e.object >= objects.size() || e.begin >= e.end || e.end > frames) throw SpecError("bad occlusion interval");
    if (!(e.coverage > 0.0) || e.coverage > 1.0) throw SpecError("occlusion coverage must be in (0, 1]");
  }
  for (const auto& e : blurs) {
    if (e.object >= objects.size() || e.begin >= e.end || e.end > frames) throw SpecError("bad blur interval");
    if (e.length == 0) throw SpecError("blur length must be positive");
  }
  for (const auto& d : distractors) {
    if (!(d.size > 0.0)) throw SpecError("distractor size must be positive");
  }
}

SyntheticSequence generate_sequence(const SequenceSpec& spec) {
  spec.validate();
  const std::size_t H = spec.height, W = spec.width, n = H * W;
  const double fw = static_cast<double>(W), fh = static_cast<double>(H);

  std::vector<double> base(3 * n);
  {
    Rng rng(derive_seed(spec.seed, 7));
    std::uniform_real_distribution<double> u(-spec.noise, spec.noise);
    for (std::size_t i = 0; i < n; ++i) {
      const double g = spec.background + u(rng);
      for (std::size_t c = 0; c < 3; ++c) base[3 * i + c] = g;
    }
  }

  SyntheticSequence out;
  for (std::size_t t = 0; t < spec.frames; ++t) {
    std::vector<double> img = base;

    for (const auto& d : spec.distractors) {
      if (t < d.appear) continue;
      const Box b{d.x, d.y, d.x + d.size, d.y + d.size};
      const auto alpha = coverage_map(b, H, W, [&](double u, double v) { return inside_distractor(d.kind, u, v); });
      std::vector<double> pm(3 * n);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < 3; ++c) pm[3 * i + c] = alpha[i] * d.color[c];
      composite(img, alpha, pm, n);
    }

    std::vector<GroundTruth> gts;
    std::vector<std::vector<double>> alphas;
    for (std::size_t o = 0; o < spec.objects.size(); ++o) {
      const ObjectSpec& os = spec.objects[o];
      const Box b = object_box(spec, o, t);
      const auto kind = static_cast<ShapeKind>(os.class_id - 1);
      auto alpha = coverage_map(b, H, W, [&](double u, double v) { return inside_shape(kind, u, v); });
      std::vector<double> pm(3 * n);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < 3; ++c) pm[3 * i + c] = alpha[i] * os.color[c];
      for (const auto& e : spec.blurs) {
        if (e.object != o || t < e.begin || t >= e.end) continue;
        const double speed = std::hypot(os.vx, os.vy);
        const double dx = speed > 0 ? os.vx / speed : 1.0, dy = speed > 0 ? os.vy / speed : 0.0;
        alpha = line_blur(alpha, H, W, e.length, dx, dy);
        std::vector<double> blurred(3 * n);
        for (std::size_t c = 0; c < 3; ++c) {
          std::vector<double> ch(n);
          for (std::size_t i = 0; i < n; ++i) ch[i] = pm[3 * i + c];
          ch = line_blur(ch, H, W, e.length, dx, dy);
          for (std::size_t i = 0; i < n; ++i) blurred[3 * i + c] = ch[i];
        }
        pm = std::move(blurred);
      }
      composite(img, alpha, pm, n);
      alphas.push_back(std::move(alpha));

      bool occluded = false;
      for (const auto& e : spec.occlusions) occluded |= e.object == o && t >= e.begin && t < e.end;
      gts.push_back({clip_box(b, fw, fh), os.class_id, occluded});
    }

    for (std::size_t ei = 0; ei < spec.occlusions.size(); ++ei) {
      const auto& e = spec.occlusions[ei];
      if (t < e.begin || t >= e.end) continue;
      const int side = static_cast<int>(derive_seed(spec.seed, 300 + ei) % 4);
      const PixelRect rect = place_occluder(alphas[e.object], H, W, e.coverage, side);
      for (std::size_t y = rect.r0; y < rect.r1; ++y)
        for (std::size_t x = rect.c0; x < rect.c1; ++x)
          for (std::size_t c = 0; c < 3; ++c) img[3 * (y * W + x) + c] = e.color[c];
    }

    Tensor<float> frame({H, W, 3});
    for (std::size_t i = 0; i < 3 * n; ++i) frame[i] = static_cast<float>(clamp01(img[i]));
    out.frames.push_back(std::move(frame));
    out.gt.push_back(std::move(gts));
  }
  return out;
}

namespace {

Color random_color(Rng& rng) {
  static const Color palette[] = {{0.9, 0.15, 0.15}, {0.15, 0.8, 0.2}, {0.2, 0.3, 0.95}, {0.95, 0.85, 0.1},
                                  {0.85, 0.2, 0.85}, {0.1, 0.85, 0.85}, {0.95, 0.55, 0.1}, {0.95, 0.95, 0.95}};
  std::uniform_int_distribution<std::size_t> pick(0, std::size(palette) - 1);
  std::uniform_real_distribution<double> j(-0.08, 0.08);
  Color c = palette[pick(rng)];
  for (double& v : c) v = clamp01(v + j(rng));
  return c;
}

ObjectSpec random_object(Rng& rng, const DatasetConfig& cfg, double speed) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  ObjectSpec o;
  o.class_id = std::uniform_int_distribution<int>(1, kNumClasses)(rng);
  o.size = cfg.min_size + (cfg.max_size - cfg.min_size) * unit(rng);
  o.color = random_color(rng);
  o.jitter = 0.25;
  const double angle = 2.0 * std::numbers::pi * unit(rng);
  const double span = static_cast<double>(cfg.frames - 1);
  const double fw = static_cast<double>(cfg.width), fh = static_cast<double>(cfg.height);
  // Shrink the speed until the whole path fits with a one-pixel margin.
  double dx = speed * std::cos(angle) * span, dy = speed * std::sin(angle) * span;
  const double room_x = fw - o.size - 2.0, room_y = fh - o.size - 2.0;
  const double shrink = std::min({1.0, room_x / std::max(std::abs(dx), 1e-9), room_y / std::max(std::abs(dy), 1e-9)});
  dx *= shrink;
  dy *= shrink;
  o.x = 1.0 + std::max(0.0, -dx) + (room_x - std::abs(dx)) * unit(rng);
  o.y = 1.0 + std::max(0.0, -dy) + (room_y - std::abs(dy)) * unit(rng);
  const double steps = span * static_cast<double>(cfg.sample_stride);
  o.vx = steps > 0 ? dx / steps : 0.0;
  o.vy = steps > 0 ? dy / steps : 0.0;
  return o;
}

}  // namespace

SequenceSpec random_sequence_spec(std::uint64_t seed, const DatasetConfig& cfg) {
  Rng rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  SequenceSpec spec;
  spec.height = cfg.height;
  spec.width = cfg.width;
  spec.frames = cfg.frames;
  spec.sample_stride = cfg.sample_stride;
  spec.seed = seed;

  const std::size_t n_obj = std::uniform_int_distribution<std::size_t>(1, std::max<std::size_t>(1, cfg.max_objects))(rng);
  for (std::size_t i = 0; i < n_obj; ++i) {
    const double speed = cfg.min_speed + (cfg.max_speed - cfg.min_speed) * unit(rng);
    spec.objects.push_back(random_object(rng, cfg, speed));
  }
  for (std::size_t i = 0; i < n_obj; ++i) {
    if (unit(rng) < cfg.occlusion_prob && cfg.frames > cfg.min_occlusion) {
      const std::size_t len = std::uniform_int_distribution<std::size_t>(
          cfg.min_occlusion, std::min(cfg.max_occlusion, cfg.frames - 1))(rng);
      OcclusionEvent e;
      e.object = i;
      e.begin = std::uniform_int_distribution<std::size_t>(1, cfg.frames - len)(rng);
      e.end = e.begin + len;
      e.coverage = cfg.min_coverage + (cfg.max_coverage - cfg.min_coverage) * unit(rng);
      const double g = 0.15 + 0.45 * unit(rng);
      for (double& c : e.color) c = clamp01(g + 0.1 * (unit(rng) - 0.5));
      spec.occlusions.push_back(e);
    }
    if (unit(rng) < cfg.blur_prob && cfg.frames > 2) {
      const std::size_t len = std::uniform_int_distribution<std::size_t>(2, std::min<std::size_t>(4, cfg.frames - 1))(rng);
      BlurEvent e;
      e.object = i;
      e.begin = std::uniform_int_distribution<std::size_t>(0, cfg.frames - len)(rng);
      e.end = e.begin + len;
      e.length = std::uniform_int_distribution<std::size_t>(3, 5)(rng);
      spec.blurs.push_back(e);
    }
  }
  const std::size_t n_dis = std::uniform_int_distribution<std::size_t>(0, cfg.max_distractors)(rng);
  for (std::size_t i = 0; i < n_dis; ++i) {
    DistractorSpec d;
    d.kind = unit(rng) < 0.5 ? DistractorKind::ring : DistractorKind::bar;
    d.size = 8.0 + 6.0 * unit(rng);
    d.x = (static_cast<double>(cfg.width) - d.size) * unit(rng);
    d.y = (static_cast<double>(cfg.height) - d.size) * unit(rng);
    d.color = random_color(rng);
    d.appear = unit(rng) < 0.7 ? 0 : std::uniform_int_distribution<std::size_t>(1, cfg.frames - 1)(rng);
    spec.distractors.push_back(d);
  }
  spec.validate();
  return spec;
}

SequenceSpec translating_sequence_spec(std::uint64_t seed, const DatasetConfig& cfg) {
  Rng rng(seed);
  SequenceSpec spec;
  spec.height = cfg.height;
  spec.width = cfg.width;
  spec.frames = cfg.frames;
  spec.sample_stride = cfg.sample_stride;
  spec.seed = seed;
  const double speed = std::uniform_real_distribution<double>(cfg.min_speed, cfg.max_speed)(rng);
  spec.objects.push_back(random_object(rng, cfg, speed));
  spec.validate();
  return spec;
}

// ---- serialization ----

namespace {

json color_json(const Color& c) { return json::array({c[0], c[1], c[2]}); }
Color color_from(const json& j) { return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()}; }

json spec_to_json(const SequenceSpec& s) {
  json j;
  j["height"] = s.height;
  j["width"] = s.width;
  j["frames"] = s.frames;
  j["sample_stride"] = s.sample_stride;
  j["background"] = s.background;
  j["noise"] = s.noise;
  j["seed"] = s.seed;
  j["objects"] = json::array();
  for (const auto& o : s.objects) {
    j["objects"].push_back({{"class_id", o.class_id}, {"size", o.size}, {"x", o.x}, {"y", o.y}, {"vx", o.vx},
                            {"vy", o.vy}, {"jitter", o.jitter}, {"color", color_json(o.color)}});
  }
  j["occlusions"] = json::array();
  for (const auto& e : s.occlusions) {
    j["occlusions"].push_back({{"object", e.object}, {"begin", e.begin}, {"end", e.end},
                               {"coverage", e.coverage}, {"color", color_json(e.color)}});
  }
  j["blurs"] = json::array();
  for (const auto& e : s.blurs) {
    j["blurs"].push_back({{"object", e.object}, {"begin", e.begin}, {"end", e.end}, {"length", e.length}});
  }
  j["distractors"] = json::array();
  for (const auto& d : s.distractors) {
    j["distractors"].push_back({{"kind", d.kind == DistractorKind::ring ? "ring" : "bar"}, {"x", d.x}, {"y", d.y},
                                {"size", d.size}, {"color", color_json(d.color)}, {"appear", d.appear}});
  }
  return j;
}

SequenceSpec spec_from_json(const json& j) {
  SequenceSpec s;
  s.height = j.at("height");
  s.width = j.at("width");
  s.frames = j.at("frames");
  s.sample_stride = j.at("sample_stride");
  s.background = j.at("background");
  s.noise = j.at("noise");
  s.seed = j.at("seed");
  for (const auto& o : j.at("objects")) {
    s.objects.push_back({o.at("class_id"), o.at("size"), o.at("x"), o.at("y"), o.at("vx"), o.at("vy"),
                         o.at("jitter"), color_from(o.at("color"))});
  }
  for (const auto& e : j.at("occlusions")) {
    s.occlusions.push_back({e.at("object"), e.at("begin"), e.at("end"), e.at("coverage"), color_from(e.at("color"))});
  }
  for (const auto& e : j.at("blurs")) s.blurs.push_back({e.at("object"), e.at("begin"), e.at("end"), e.at("length")});
  for (const auto& d : j.at("distractors")) {
    s.distractors.push_back({d.at("kind") == "ring" ? DistractorKind::ring : DistractorKind::bar, d.at("x"),
                             d.at("y"), d.at("size"), color_from(d.at("color")), d.at("appear")});
  }
  return s;
}

json config_to_json(const DatasetConfig& c) {
  return {{"height", c.height}, {"width", c.width}, {"frames", c.frames}, {"sample_stride", c.sample_stride},
          {"max_objects", c.max_objects}, {"min_size", c.min_size}, {"max_size", c.max_size},
          {"min_speed", c.min_speed}, {"max_speed", c.max_speed}, {"occlusion_prob", c.occlusion_prob},
          {"min_occlusion", c.min_occlusion}, {"max_occlusion", c.max_occlusion},
          {"min_coverage", c.min_coverage}, {"max_coverage", c.max_coverage}, {"blur_prob", c.blur_prob},
          {"max_distractors", c.max_distractors}};
}

DatasetConfig config_from_json(const json& j) {
  DatasetConfig c;
  c.height = j.at("height");
  c.width = j.at("width");
  c.frames = j.at("frames");
  c.sample_stride = j.at("sample_stride");
  c.max_objects = j.at("max_objects");
  c.min_size = j.at("min_size");
  c.max_size = j.at("max_size");
  c.min_speed = j.at("min_speed");
  c.max_speed = j.at("max_speed");
  c.occlusion_prob = j.at("occlusion_prob");
  c.min_occlusion = j.at("min_occlusion");
  c.max_occlusion = j.at("max_occlusion");
  c.min_coverage = j.at("min_coverage");
  c.max_coverage = j.at("max_coverage");
  c.blur_prob = j.at("blur_prob");
  c.max_distractors = j.at("max_distractors");
  return c;
}

json gt_to_json(const SyntheticSequence& s) {
  json frames = json::array();
  for (const auto& f : s.gt) {
    json list = json::array();
    for (const auto& g : f) {
      list.push_back({{"class", g.class_id}, {"occluded", g.occluded},
                      {"box", {g.box.x1, g.box.y1, g.box.x2, g.box.y2}}});
    }
    frames.push_back(std::move(list));
  }
  return frames;
}

std::vector<std::vector<GroundTruth>> gt_from_json(const json& j) {
  std::vector<std::vector<GroundTruth>> out;
  for (const auto& f : j) {
    std::vector<GroundTruth> list;
    for (const auto& g : f) {
      const auto& b = g.at("box");
      list.push_back({{b.at(0), b.at(1), b.at(2), b.at(3)}, g.at("class"), g.at("occluded")});
    }
    out.push_back(std::move(list));
  }
  return out;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os << text;
  if (!os) throw IoError("write failed: " + path.string());
}

json read_json(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read " + path.string());
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

std::string entry_id(const char* split, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s_%04zu", split, i);
  return buf;
}

}  // namespace

Dataset make_dataset(std::size_t n_train, std::size_t n_val, std::uint64_t seed, const DatasetConfig& cfg) {
  Dataset ds;
  ds.seed = seed;
  ds.config = cfg;
  for (std::size_t i = 0; i < n_train; ++i) {
    auto spec = random_sequence_spec(derive_seed(seed, 2 * i), cfg);
    ds.train.push_back({entry_id("train", i), spec, generate_sequence(spec)});
  }
  for (std::size_t i = 0; i < n_val; ++i) {
    auto spec = random_sequence_spec(derive_seed(seed, 2 * i + 1), cfg);
    ds.val.push_back({entry_id("val", i), spec, generate_sequence(spec)});
  }
  return ds;
}

void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  json manifest;
  manifest["format"] = 1;
  manifest["seed"] = ds.seed;
  manifest["config"] = config_to_json(ds.config);
  for (const auto* split : {&ds.train, &ds.val}) {
    json list = json::array();
    for (const auto& e : *split) {
      const auto& frames = e.sequence.frames;
      if (frames.empty()) throw UsageError("save_dataset: empty sequence " + e.id);
      Tensor<float> stacked({frames.size(), frames[0].height(), frames[0].width(), 3});
      for (std::size_t t = 0; t < frames.size(); ++t) {
        std::copy(frames[t].values().begin(), frames[t].values().end(), stacked.raw() + t * frames[t].size());
      }
      save_tensor(dir / (e.id + ".stmn"), stacked);
      json meta{{"id", e.id}, {"spec", spec_to_json(e.spec)}, {"gt", gt_to_json(e.sequence)}};
      write_text(dir / (e.id + ".json"), meta.dump(1) + "\n");
      list.push_back({{"id", e.id}, {"frames", e.id + ".stmn"}, {"meta", e.id + ".json"}});
    }
    manifest[split == &ds.train ? "train" : "val"] = std::move(list);
  }
  write_text(dir / "manifest.json", manifest.dump(1) + "\n");
}

Dataset load_dataset(const std::filesystem::path& dir) {
  const json manifest = read_json(dir / "manifest.json");
  Dataset ds;
  try {
    ds.seed = manifest.at("seed");
    ds.config = config_from_json(manifest.at("config"));
    for (const char* split : {"train", "val"}) {
      auto& out = std::string_view(split) == "train" ? ds.train : ds.val;
      for (const auto& item : manifest.at(split)) {
        DatasetEntry e;
        e.id = item.at("id");
        const json meta = read_json(dir / item.at("meta").get<std::string>());
        e.spec = spec_from_json(meta.at("spec"));
        e.sequence.gt = gt_from_json(meta.at("gt"));
        const auto stacked = load_tensor<float>(dir / item.at("frames").get<std::string>());
        if (stacked.rank() != 4 || stacked.dim(0) != e.sequence.gt.size()) {
          throw IoError("frame tensor of " + e.id + " does not match its ground truth");
        }
        const std::size_t per = stacked.size() / stacked.dim(0);
        for (std::size_t t = 0; t < stacked.dim(0); ++t) {
          std::vector<float> data(stacked.raw() + t * per, stacked.raw() + (t + 1) * per);
          e.sequence.frames.emplace_back(Shape{stacked.dim(1), stacked.dim(2), stacked.dim(3)}, std::move(data));
        }
        out.push_back(std::move(e));
      }
    }
  } catch (const json::exception& e) {
    throw IoError("malformed manifest in " + dir.string() + ": " + e.what());
  }
  return ds;
}

void build_dataset(const std::filesystem::path& dir, std::size_t n_train, std::size_t n_val,
                   std::uint64_t seed, const DatasetConfig& cfg) {
  save_dataset(make_dataset(n_train, n_val, seed, cfg), dir);
}

void write_ppm(const std::filesystem::path& path, const Tensor<float>& image) {
  const bool gray = image.rank() == 2 || (image.rank() == 3 && image.channels() == 1);
  if (!gray && (image.rank() != 3 || image.channels() != 3)) throw ShapeError("write_ppm: need H x W x 3 or H x W");
  const std::size_t H = image.dim(0), W = image.dim(1);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os << "P6\n" << W << " " << H << "\n255\n";
  std::vector<unsigned char> bytes;
  bytes.reserve(3 * H * W);
  for (std::size_t i = 0; i < H * W; ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      const float v = gray ? image[i] : image[3 * i + c];
      bytes.push_back(static_cast<unsigned char>(std::lround(clamp01(v) * 255.0)));
    }
  }
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("write failed: " + path.string());
}

void draw_box(Tensor<float>& image, const Box& box, const Color& color) {
  const long H = static_cast<long>(image.height()), W = static_cast<long>(image.width());
  const long x1 = std::lround(box.x1), y1 = std::lround(box.y1);
  const long x2 = std::lround(box.x2) - 1, y2 = std::lround(box.y2) - 1;
  auto put = [&](long y, long x) {
    if (y < 0 || y >= H || x < 0 || x >= W) return;
    for (std::size_t c = 0; c < 3; ++c) {
      image.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x), c) = static_cast<float>(color[c]);
    }
  };
  for (long x = x1; x <= x2; ++x) { put(y1, x); put(y2, x); }
  for (long y = y1; y <= y2; ++y) { put(y, x1); put(y, x2); }
}

}  // namespace stmn
