#pragma once

// Event streams: text I/O, fixed-interval binning into polarity tensors, and
// a frame-to-event converter modelling a DVS pixel.
//
// Binned tensors are laid out T x 2 x H x W (time, polarity, row, column).
// Channel 0 holds positive events, channel 1 negative.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace s3ce {

class FormatError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

struct SensorGeometry {
  std::size_t width = 24;   // columns
  std::size_t height = 48;  // rows

  void validate() const {
    if (width < 1 || height < 1) throw std::invalid_argument("sensor geometry must be at least 1x1");
  }
};

struct Event {
  std::int64_t t = 0;  // microseconds
  std::uint16_t x = 0;
  std::uint16_t y = 0;
  std::int8_t p = 1;  // +1 or -1

  friend bool operator==(const Event&, const Event&) = default;
};

using EventStream = std::vector<Event>;

struct EventTensorSequence {
  std::size_t steps = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::int64_t window_us = 0;
  std::int64_t t0 = 0;
  std::vector<float> data;  // steps * 2 * height * width

  std::size_t index(std::size_t k, std::size_t channel, std::size_t y, std::size_t x) const {
    return ((k * 2 + channel) * height + y) * width + x;
  }
  float at(std::size_t k, std::size_t channel, std::size_t y, std::size_t x) const {
    return data[index(k, channel, y, x)];
  }
};

inline void sort_by_time(EventStream& events) {
  std::stable_sort(events.begin(), events.end(), [](const Event& a, const Event& b) { return a.t < b.t; });
}

namespace detail {

inline std::optional<std::int64_t> parse_int(const std::string& field) {
  std::size_t start = field.find_first_not_of(" \t\r");
  std::size_t end = field.find_last_not_of(" \t\r");
  if (start == std::string::npos) return std::nullopt;
  std::string trimmed = field.substr(start, end - start + 1);
  try {
    std::size_t used = 0;
    long long v = std::stoll(trimmed, &used);
    if (used != trimmed.size()) return std::nullopt;
    return v;
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

}  // namespace detail

// One event per line as `t_us,x,y,p` with p in {0,1}; lines starting with
// '#' and blank lines are skipped.
inline EventStream parse_events(std::istream& in, const SensorGeometry& geom, const std::string& origin = "<stream>") {
  geom.validate();
  EventStream events;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos || line[line.find_first_not_of(" \t")] == '#') continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    for (std::string f; std::getline(ss, f, ',');) fields.push_back(f);
    auto fail = [&](const std::string& why) {
      throw FormatError(origin + ":" + std::to_string(lineno) + ": " + why);
    };
    if (fields.size() != 4) fail("expected 4 comma-separated fields, got " + std::to_string(fields.size()));
    std::int64_t v[4];
    for (int i = 0; i < 4; ++i) {
      auto parsed = detail::parse_int(fields[i]);
      if (!parsed) fail("field " + std::to_string(i + 1) + " is not an integer");
      v[i] = *parsed;
    }
    if (v[0] < 0) fail("negative timestamp");
    if (v[1] < 0 || v[1] >= static_cast<std::int64_t>(geom.width) || v[2] < 0 ||
        v[2] >= static_cast<std::int64_t>(geom.height))
      fail("coordinate (" + std::to_string(v[1]) + "," + std::to_string(v[2]) + ") outside " +
           std::to_string(geom.width) + "x" + std::to_string(geom.height) + " sensor");
    if (v[3] != 0 && v[3] != 1) fail("polarity must be 0 or 1");
    events.push_back(Event{v[0], static_cast<std::uint16_t>(v[1]), static_cast<std::uint16_t>(v[2]),
                           static_cast<std::int8_t>(v[3] == 1 ? 1 : -1)});
  }
  sort_by_time(events);
  return events;
}

inline EventStream parse_event_file(const std::filesystem::path& path, const SensorGeometry& geom) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open event file " + path.string());
  return parse_events(in, geom, path.string());
}

inline void write_events(std::ostream& out, const EventStream& events) {
  out << "# t_us,x,y,p\n";
  for (const auto& e : events) out << e.t << ',' << e.x << ',' << e.y << ',' << (e.p > 0 ? 1 : 0) << '\n';
}

inline void write_event_file(const std::filesystem::path& path, const EventStream& events) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  write_events(out, events);
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

struct BinningOptions {
  std::int64_t t0 = 0;
  std::optional<float> clip;  // saturate cell counts; unset keeps raw counts
};

// Event e lands in bin floor((e.t - t0) / window_us); events before t0 or
// past the last bin are dropped.
inline EventTensorSequence bin_events(const EventStream& stream, std::size_t steps, std::int64_t window_us,
                                      const SensorGeometry& geom, const BinningOptions& opts = {}) {
  if (steps < 1) throw std::invalid_argument("bin_events: T must be >= 1");
  if (window_us < 1) throw std::invalid_argument("bin_events: window must be >= 1 us");
  geom.validate();
  EventTensorSequence seq;
  seq.steps = steps;
  seq.height = geom.height;
  seq.width = geom.width;
  seq.window_us = window_us;
  seq.t0 = opts.t0;
  seq.data.assign(steps * 2 * geom.height * geom.width, 0.0f);
  for (const auto& e : stream) {
    if (e.t < opts.t0) continue;
    const auto k = static_cast<std::size_t>((e.t - opts.t0) / window_us);
    if (k >= steps) continue;
    if (e.x >= geom.width || e.y >= geom.height) throw std::invalid_argument("bin_events: event outside sensor");
    seq.data[seq.index(k, e.p > 0 ? 0 : 1, e.y, e.x)] += 1.0f;
  }
  if (opts.clip)
    for (auto& v : seq.data) v = std::min(v, *opts.clip);
  return seq;
}

// Row-major H x W luminance image.
struct Frame {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> lum;

  double at(std::size_t y, std::size_t x) const { return lum[y * width + x]; }
  double& at(std::size_t y, std::size_t x) { return lum[y * width + x]; }
};

inline constexpr double kLuminanceFloor = 1e-3;

// Each pixel integrates the change in log(L + floor) between frames; every
// whole multiple of the contrast threshold emits one event of that sign,
// spread evenly over the inter-frame interval, and the remainder carries on.
inline EventStream simulate_dvs(const std::vector<Frame>& frames, double threshold, std::int64_t frame_dt_us) {
  if (threshold <= 0.0) throw std::invalid_argument("simulate_dvs: contrast threshold must be positive");
  if (frames.size() < 2) throw std::invalid_argument("simulate_dvs: need at least two frames");
  if (frame_dt_us < 1) throw std::invalid_argument("simulate_dvs: frame interval must be >= 1 us");
  const std::size_t h = frames[0].height, w = frames[0].width;
  for (const auto& f : frames)
    if (f.height != h || f.width != w || f.lum.size() != h * w)
      throw std::invalid_argument("simulate_dvs: frames differ in size");

  std::vector<double> residual(h * w, 0.0);
  EventStream events;
  for (std::size_t k = 0; k + 1 < frames.size(); ++k) {
    const std::int64_t base = static_cast<std::int64_t>(k) * frame_dt_us;
    for (std::size_t i = 0; i < h * w; ++i) {
      residual[i] += std::log(frames[k + 1].lum[i] + kLuminanceFloor) - std::log(frames[k].lum[i] + kLuminanceFloor);
      const double count = std::floor(std::abs(residual[i]) / threshold);
      if (count < 1.0) continue;
      const auto n = static_cast<std::int64_t>(count);
      const std::int8_t sign = residual[i] > 0 ? 1 : -1;
      residual[i] -= sign * count * threshold;
      for (std::int64_t j = 0; j < n; ++j) {
        const std::int64_t t = base + ((2 * j + 1) * frame_dt_us) / (2 * n);
        events.push_back(Event{t, static_cast<std::uint16_t>(i % w), static_cast<std::uint16_t>(i / w), sign});
      }
    }
  }
  sort_by_time(events);
  return events;
}

}  // namespace s3ce
