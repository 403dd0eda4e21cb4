#pragma once

// Deterministic synthetic event-camera re-identification data. Each identity
// is an articulated walker with its own body proportions, gait and clothing
// texture; each camera has its own gain, mirroring and sensor noise. Frames
// go through simulate_dvs() and land on disk in the text event format.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "events.hpp"
#include "rng.hpp"

namespace s3ce {

struct IdentityParams {
  double aspect = 0.5;        // torso width / torso height
  double gait_freq = 0.05;    // stride cycles per frame
  double limb_phase = 0.0;    // arm swing lead over the legs, radians
  double stride_amp = 0.4;    // leg swing amplitude, radians
  std::uint64_t texture_seed = 0;

  friend bool operator==(const IdentityParams&, const IdentityParams&) = default;
};

struct CameraParams {
  int id = 1;
  bool mirror = false;
  double gain = 1.0;
  double noise = 0.0;  // std of additive luminance noise
};

inline CameraParams default_camera(int id) {
  if (id % 2 == 1) return {id, false, 1.0, 0.01};
  return {id, true, 0.7, 0.01};
}

// Attribute ranges. Each attribute is stratified over n_ids so no two
// identities fall in the same stratum of any attribute.
inline std::vector<IdentityParams> gen_identity_params(std::uint64_t seed, std::size_t n_ids) {
  if (n_ids < 2) throw std::invalid_argument("gen_identity_params: need at least 2 identities");
  Rng rng(derive_seed(seed, "identities"));
  auto strata = [&](double lo, double hi) {
    std::vector<std::size_t> perm(n_ids);
    for (std::size_t i = 0; i < n_ids; ++i) perm[i] = i;
    rng.shuffle(perm);
    std::vector<double> v(n_ids);
    const double cell = (hi - lo) / static_cast<double>(n_ids);
    for (std::size_t i = 0; i < n_ids; ++i) v[i] = lo + cell * (static_cast<double>(perm[i]) + rng.uniform(0.25, 0.75));
    return v;
  };
  const auto aspect = strata(0.45, 0.6);
  const auto gait = strata(0.02, 0.12);
  const auto phase = strata(0.0, std::numbers::pi);
  const auto stride = strata(0.15, 0.75);
  std::vector<IdentityParams> ids(n_ids);
  for (std::size_t i = 0; i < n_ids; ++i) ids[i] = {aspect[i], gait[i], phase[i], stride[i], rng.next()};
  return ids;
}

namespace detail {

inline double segment_distance(double px, double py, double ax, double ay, double bx, double by) {
  const double dx = bx - ax, dy = by - ay;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0 ? ((px - ax) * dx + (py - ay) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double ex = px - (ax + t * dx), ey = py - (ay + t * dy);
  return std::sqrt(ex * ex + ey * ey);
}

// Antialiased coverage from a signed distance in pixels.
inline double coverage(double signed_dist) { return std::clamp(0.5 - signed_dist, 0.0, 1.0); }

struct Texture {
  double torso_shade, stripe_period, stripe_contrast, leg_shade, arm_shade;
};

inline Texture texture_from_seed(std::uint64_t seed) {
  Rng rng(seed);
  Texture t;
  t.torso_shade = rng.uniform(0.15, 0.35);
  t.stripe_period = rng.uniform(3.0, 8.0);
  t.stripe_contrast = rng.uniform(0.0, 0.05);
  t.leg_shade = rng.uniform(0.12, 0.3);
  t.arm_shade = rng.uniform(0.2, 0.4);
  return t;
}

}  // namespace detail

struct SequenceMotion {
  double x0, speed, y_offset, phase0;
};

inline SequenceMotion motion_from_seed(std::uint64_t seed) {
  Rng rng(derive_seed(seed, "motion"));
  SequenceMotion m;
  m.x0 = rng.uniform(6.0, 9.0);
  m.speed = rng.uniform(0.12, 0.2);
  m.y_offset = rng.uniform(-1.0, 1.0);
  m.phase0 = rng.uniform(0.0, 2.0 * std::numbers::pi);
  return m;
}

// Walker rendered on a uniform background, scaled to the sensor height.
inline std::vector<Frame> render_sequence(const IdentityParams& id, const CameraParams& cam, std::size_t n_frames,
                                          std::uint64_t seed, const SensorGeometry& geom = {}) {
  geom.validate();
  if (n_frames < 2) throw std::invalid_argument("render_sequence: need at least 2 frames");
  const auto tex = detail::texture_from_seed(id.texture_seed);
  const auto motion = motion_from_seed(seed);
  Rng noise(derive_seed(seed, "noise:" + std::to_string(cam.id)));
  const double s = static_cast<double>(geom.height) / 48.0;
  const double background = 0.6;

  std::vector<Frame> frames(n_frames);
  for (std::size_t f = 0; f < n_frames; ++f) {
    const double fx = static_cast<double>(f);
    const double cx = (motion.x0 + motion.speed * fx) * static_cast<double>(geom.width) / 24.0;
    const double oy = motion.y_offset * s;
    const double phi = 2.0 * std::numbers::pi * id.gait_freq * fx + motion.phase0;
    const double leg = id.stride_amp * std::sin(phi);
    const double arm = 0.6 * id.stride_amp * std::sin(phi + id.limb_phase);

    const double head_y = 6.0 * s + oy, head_r = 3.0 * s;
    const double torso_y = 18.0 * s + oy, torso_ry = 8.0 * s, torso_rx = id.aspect * 8.0 * s;
    const double hip_y = 25.0 * s + oy, leg_len = 16.0 * s, leg_r = 1.6 * s;
    const double shoulder_y = 12.0 * s + oy, arm_len = 11.0 * s, arm_r = 1.2 * s;

    Frame& fr = frames[f];
    fr.height = geom.height;
    fr.width = geom.width;
    fr.lum.assign(geom.height * geom.width, background);
    for (std::size_t y = 0; y < geom.height; ++y)
      for (std::size_t x = 0; x < geom.width; ++x) {
        const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
        double L = background;
        auto paint = [&L](double cov, double shade) { L = L * (1.0 - cov) + shade * cov; };
        for (double sign : {1.0, -1.0}) {
          const double a = sign * leg;
          paint(detail::coverage(detail::segment_distance(px, py, cx, hip_y, cx + leg_len * std::sin(a),
                                                          hip_y + leg_len * std::cos(a)) -
                                 leg_r),
                tex.leg_shade);
        }
        {
          const double ex = (px - cx) / torso_rx, ey = (py - torso_y) / torso_ry;
          const double r = std::sqrt(ex * ex + ey * ey);
          const double sd = (r - 1.0) * std::min(torso_rx, torso_ry);
          const double stripe = tex.stripe_contrast * std::sin(2.0 * std::numbers::pi * (py - torso_y) / tex.stripe_period);
          paint(detail::coverage(sd), tex.torso_shade + stripe);
        }
        for (double sign : {-1.0, 1.0}) {
          const double a = sign * arm;
          paint(detail::coverage(detail::segment_distance(px, py, cx, shoulder_y, cx + arm_len * std::sin(a),
                                                          shoulder_y + arm_len * std::cos(a)) -
                                 arm_r),
                tex.arm_shade);
        }
        {
          const double dx = px - cx, dy = py - head_y;
          paint(detail::coverage(std::sqrt(dx * dx + dy * dy) - head_r), 0.35);
        }
        fr.at(y, x) = L;
      }
    if (cam.mirror)
      for (std::size_t y = 0; y < geom.height; ++y)
        std::reverse(fr.lum.begin() + static_cast<std::ptrdiff_t>(y * geom.width),
                     fr.lum.begin() + static_cast<std::ptrdiff_t>((y + 1) * geom.width));
    for (auto& v : fr.lum) {
      v *= cam.gain;
      if (cam.noise > 0) v += cam.noise * noise.normal();
      v = std::max(v, kLuminanceFloor);
    }
  }
  return frames;
}

struct SynthConfig {
  std::size_t ids = 8;
  std::size_t cams = 2;
  std::size_t seqs = 6;  // per identity per camera
  std::size_t frames = 64;
  std::int64_t frame_dt_us = 33333;
  double threshold = 0.4;
  SensorGeometry geom{};
  std::uint64_t seed = 0;
};

struct ManifestEntry {
  int id = 0, cam = 0, seq = 0;
  std::string path;  // relative to the dataset root
  std::size_t n_events = 0;
};

struct Manifest {
  SynthConfig config;
  std::vector<ManifestEntry> entries;
};

inline std::uint64_t sequence_seed(std::uint64_t master, int id, int cam, int seq) {
  return derive_seed(derive_seed(derive_seed(master, "sequence"), static_cast<std::uint64_t>(id)),
                     static_cast<std::uint64_t>(cam) * 1000003ULL + static_cast<std::uint64_t>(seq));
}

inline EventStream generate_events(const IdentityParams& id, const CameraParams& cam, const SynthConfig& cfg,
                                   std::uint64_t seq_seed) {
  return simulate_dvs(render_sequence(id, cam, cfg.frames, seq_seed, cfg.geom), cfg.threshold, cfg.frame_dt_us);
}

inline void write_manifest(const std::filesystem::path& path, const Manifest& m) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  const auto& c = m.config;
  out << "# seed=" << c.seed << '\n'
      << "# ids=" << c.ids << " cams=" << c.cams << " seqs=" << c.seqs << " frames=" << c.frames
      << " frame_dt_us=" << c.frame_dt_us << " threshold=" << c.threshold << " width=" << c.geom.width
      << " height=" << c.geom.height << '\n'
      << "id,cam,seq,path,n_events\n";
  for (const auto& e : m.entries) out << e.id << ',' << e.cam << ',' << e.seq << ',' << e.path << ',' << e.n_events << '\n';
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

inline Manifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open manifest " + path.string());
  Manifest m;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::istringstream ss(line.substr(1));
      for (std::string kv; ss >> kv;) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) continue;
        const std::string k = kv.substr(0, eq), v = kv.substr(eq + 1);
        auto& c = m.config;
        if (k == "seed") c.seed = std::stoull(v);
        else if (k == "ids") c.ids = std::stoul(v);
        else if (k == "cams") c.cams = std::stoul(v);
        else if (k == "seqs") c.seqs = std::stoul(v);
        else if (k == "frames") c.frames = std::stoul(v);
        else if (k == "frame_dt_us") c.frame_dt_us = std::stoll(v);
        else if (k == "threshold") c.threshold = std::stod(v);
        else if (k == "width") c.geom.width = std::stoul(v);
        else if (k == "height") c.geom.height = std::stoul(v);
      }
      continue;
    }
    if (line.rfind("id,", 0) == 0) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string part; std::getline(ss, part, ',');) f.push_back(part);
    if (f.size() != 5) throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected 5 fields");
    try {
      m.entries.push_back({std::stoi(f[0]), std::stoi(f[1]), std::stoi(f[2]), f[3], std::stoul(f[4])});
    } catch (const std::exception&) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": malformed manifest row");
    }
  }
  return m;
}

// Writes <root>/<id>/<cam>/<seq>.events for every combination plus
// <root>/manifest.csv. Identities are numbered from 0, cameras from 1.
inline Manifest make_dataset(const std::filesystem::path& root, const SynthConfig& cfg) {
  namespace fs = std::filesystem;
  if (cfg.cams < 1 || cfg.seqs < 1) throw std::invalid_argument("make_dataset: need at least one camera and sequence");
  const auto ids = gen_identity_params(cfg.seed, cfg.ids);
  Manifest m{cfg, {}};
  for (std::size_t i = 0; i < cfg.ids; ++i)
    for (std::size_t c = 1; c <= cfg.cams; ++c) {
      const auto cam = default_camera(static_cast<int>(c));
      const fs::path dir = root / std::to_string(i) / std::to_string(c);
      fs::create_directories(dir);
      for (std::size_t s = 0; s < cfg.seqs; ++s) {
        const auto seed = sequence_seed(cfg.seed, static_cast<int>(i), static_cast<int>(c), static_cast<int>(s));
        const auto events = generate_events(ids[i], cam, cfg, seed);
        const std::string rel = std::to_string(i) + "/" + std::to_string(c) + "/" + std::to_string(s) + ".events";
        write_event_file(root / rel, events);
        m.entries.push_back({static_cast<int>(i), static_cast<int>(c), static_cast<int>(s), rel, events.size()});
      }
    }
  write_manifest(root / "manifest.csv", m);
  return m;
}

}  // namespace s3ce
