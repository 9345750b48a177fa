#pragma once

// Staged voltage program for a shuttle experiment and the ideal moving-dot
// trajectory it induces. The travelling-wave segment drives the four gate
// sets with
//   V_Si(tau) = U_i * sin(2 pi f tau + phi_i) + C_i
// and moves the dot at v = f * lambda; position is tied to the drive phase
// by x = lambda * dphi / (2 pi).

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "shuttlesim/io.hpp"

namespace shuttlesim {

enum class StageKind {
  load,
  init_i,
  separate_s,
  close_t,
  shuttle,
  wait_at,
  wait_dqd,
  psb_p,
  freeze_f,
  measure_m,
};

inline std::string to_string(StageKind k) {
  switch (k) {
    case StageKind::load: return "load";
    case StageKind::init_i: return "init_i";
    case StageKind::separate_s: return "separate_s";
    case StageKind::close_t: return "close_t";
    case StageKind::shuttle: return "shuttle";
    case StageKind::wait_at: return "wait_at";
    case StageKind::wait_dqd: return "wait_dqd";
    case StageKind::psb_p: return "psb_p";
    case StageKind::freeze_f: return "freeze_f";
    case StageKind::measure_m: return "measure_m";
  }
  return "?";
}

inline StageKind stage_kind_from_string(const std::string& s) {
  for (int k = 0; k <= static_cast<int>(StageKind::measure_m); ++k)
    if (to_string(static_cast<StageKind>(k)) == s)
      return static_cast<StageKind>(k);
  throw std::invalid_argument("unknown stage kind: " + s);
}

enum class ShuttleDirection { forward, backward };

struct ShuttleSegment {
  double frequency_hz = 1e7;
  double amplitude_lower_v = 0.150;  // U applied to gate-sets S1/S3 (2nd layer)
  double amplitude_upper_v = 0.192;  // U applied to gate-sets S2/S4 (3rd layer)
  std::array<double, 4> offsets_v{0.7, 0.896, 0.7, 0.896};
  std::array<double, 4> phases_rad{-M_PI / 2.0, 0.0, M_PI / 2.0, M_PI};
  double duration_s = 0.0;
  ShuttleDirection direction = ShuttleDirection::forward;
  double lambda_nm = 280.0;

  static constexpr double crosstalk_factor = 1.28;

  // The upper-layer gates couple more weakly to the channel; the larger
  // amplitude compensates.
  static ShuttleSegment with_crosstalk_compensation(double u_lower_v) {
    ShuttleSegment s;
    s.amplitude_lower_v = u_lower_v;
    s.amplitude_upper_v = crosstalk_factor * u_lower_v;
    return s;
  }

  double velocity_mps() const { return frequency_hz * lambda_nm * 1e-9; }

  double phase_advance_rad() const {
    const double mag = 2.0 * M_PI * frequency_hz * duration_s;
    return direction == ShuttleDirection::forward ? mag : -mag;
  }

  double displacement_nm() const {
    return lambda_nm * phase_advance_rad() / (2.0 * M_PI);
  }
};

// V_Si(tau) for gate_index in 1..4. A backward segment is the time
// reverse of the forward one: it is evaluated at (duration - tau).
inline double waveform_at(const ShuttleSegment& seg, double tau_s, int gate_index) {
  if (gate_index < 1 || gate_index > 4)
    throw std::invalid_argument("waveform_at: gate_index must be in 1..4");
  if (tau_s < 0.0 || tau_s > seg.duration_s)
    throw std::invalid_argument("waveform_at: tau outside segment duration");
  const double t = seg.direction == ShuttleDirection::forward
                       ? tau_s
                       : seg.duration_s - tau_s;
  const double u = (gate_index == 1 || gate_index == 3) ? seg.amplitude_lower_v
                                                        : seg.amplitude_upper_v;
  const int i = gate_index - 1;
  return u * std::sin(2.0 * M_PI * seg.frequency_hz * t + seg.phases_rad[i]) +
         seg.offsets_v[i];
}

struct Stage {
  StageKind kind = StageKind::load;
  double duration_s = 0.0;       // wait/static stage length
  double x_nm = 0.0;             // wait_at hold position
  ShuttleSegment segment;        // shuttle stages only

  static Stage statics(StageKind k, double duration_s = 0.0) {
    Stage s;
    s.kind = k;
    s.duration_s = duration_s;
    return s;
  }
  static Stage shuttle(const ShuttleSegment& seg) {
    Stage s;
    s.kind = StageKind::shuttle;
    s.duration_s = seg.duration_s;
    s.segment = seg;
    return s;
  }
  static Stage wait_at(double x_nm, double tau_s) {
    Stage s;
    s.kind = StageKind::wait_at;
    s.duration_s = tau_s;
    s.x_nm = x_nm;
    return s;
  }
  static Stage wait_dqd(double tau_s) {
    Stage s;
    s.kind = StageKind::wait_dqd;
    s.duration_s = tau_s;
    return s;
  }
};

struct PulseSchedule {
  std::vector<Stage> stages;
  double magnetic_field_t = 0.8;
};

// Structural check against the stage grammar
//   Load InitI SeparateS CloseT (Shuttle|WaitAt)* SeparateS WaitDQD?
//   PsbP FreezeF MeasureM
// plus the requirement that shuttle displacements return the dot to x = 0.
// Returns a list of problems; empty means the schedule is valid.
inline std::vector<std::string> schedule_problems(const PulseSchedule& sched) {
  std::vector<std::string> problems;
  const auto& st = sched.stages;
  std::size_t i = 0;
  auto expect = [&](StageKind k) {
    if (i < st.size() && st[i].kind == k) {
      ++i;
      return true;
    }
    problems.push_back("expected stage " + to_string(k) + " at position " +
                       std::to_string(i) + ", found " +
                       (i < st.size() ? to_string(st[i].kind) : std::string("end")));
    return false;
  };
  expect(StageKind::load);
  expect(StageKind::init_i);
  expect(StageKind::separate_s);
  expect(StageKind::close_t);
  while (i < st.size() &&
         (st[i].kind == StageKind::shuttle || st[i].kind == StageKind::wait_at))
    ++i;
  expect(StageKind::separate_s);
  if (i < st.size() && st[i].kind == StageKind::wait_dqd) ++i;
  expect(StageKind::psb_p);
  expect(StageKind::freeze_f);
  expect(StageKind::measure_m);
  if (i != st.size())
    problems.push_back("trailing stages after measure_m");

  double net_nm = 0.0;
  double scale = 0.0;
  for (const auto& s : st)
    if (s.kind == StageKind::shuttle) {
      net_nm += s.segment.displacement_nm();
      scale += std::abs(s.segment.displacement_nm());
    }
  if (std::abs(net_nm) > 1e-9 * std::max(scale, 1.0))
    problems.push_back("shuttle displacements do not return to x = 0 (net " +
                       io::format_double(net_nm) + " nm)");
  return problems;
}

inline bool schedule_is_valid(const PulseSchedule& sched) {
  return schedule_problems(sched).empty();
}

// --- trajectory -------------------------------------------------------------

struct Trajectory {
  struct Sample {
    double t_s;
    double x_nm;
  };
  std::vector<Sample> samples;   // breakpoints of the piecewise-linear path
  std::vector<bool> moving;      // per interval: true during shuttle motion
  double velocity_mps = 0.0;     // peak |dx/dt| over the program

  double total_time_s() const {
    return samples.empty() ? 0.0 : samples.back().t_s;
  }

  double path_length_nm() const {
    double total = 0.0;
    for (std::size_t k = 1; k < samples.size(); ++k)
      total += std::abs(samples[k].x_nm - samples[k - 1].x_nm);
    return total;
  }

  double max_x_nm() const {
    double m = 0.0;
    for (const auto& s : samples) m = std::max(m, s.x_nm);
    return m;
  }

  double x_at(double t_s) const {
    if (samples.empty()) return 0.0;
    if (t_s <= samples.front().t_s) return samples.front().x_nm;
    if (t_s >= samples.back().t_s) return samples.back().x_nm;
    for (std::size_t k = 1; k < samples.size(); ++k) {
      if (t_s <= samples[k].t_s) {
        const auto& a = samples[k - 1];
        const auto& b = samples[k];
        const double dt = b.t_s - a.t_s;
        if (dt <= 0.0) return b.x_nm;
        const double w = (t_s - a.t_s) / dt;
        return a.x_nm + w * (b.x_nm - a.x_nm);
      }
    }
    return samples.back().x_nm;
  }
};

// Ideal propagating-wave position over the coherent window (all Shuttle,
// WaitAt and WaitDQD stages): x advances at f*lambda during shuttle stages
// and is constant otherwise.
inline Trajectory trajectory_of(const PulseSchedule& sched) {
  Trajectory traj;
  traj.samples.push_back({0.0, 0.0});
  double t = 0.0, x = 0.0;
  for (const auto& s : sched.stages) {
    switch (s.kind) {
      case StageKind::shuttle: {
        t += s.duration_s;
        x += s.segment.displacement_nm();
        traj.samples.push_back({t, x});
        traj.moving.push_back(true);
        traj.velocity_mps = std::max(traj.velocity_mps, s.segment.velocity_mps());
        break;
      }
      case StageKind::wait_at: {
        if (std::abs(s.x_nm - x) > 1e-6)
          throw std::invalid_argument(
              "trajectory_of: wait_at position discontinuous with path (at x=" +
              io::format_double(x) + " nm, stage says " +
              io::format_double(s.x_nm) + " nm)");
        t += s.duration_s;
        traj.samples.push_back({t, x});
        traj.moving.push_back(false);
        break;
      }
      case StageKind::wait_dqd: {
        t += s.duration_s;
        traj.samples.push_back({t, x});
        traj.moving.push_back(false);
        break;
      }
      default:
        break;  // static stages do not advance the coherent window
    }
  }
  if (std::abs(traj.samples.back().x_nm) > 1e-9)
    throw std::invalid_argument("trajectory_of: path does not end at x = 0");
  return traj;
}

// Largest shuttle-gate voltage step across consecutive shuttle segments.
// Well-formed programs are phase-continuous, so this should vanish.
inline double max_gate_voltage_jump(const PulseSchedule& sched) {
  double worst = 0.0;
  const ShuttleSegment* prev = nullptr;
  for (const auto& s : sched.stages) {
    if (s.kind != StageKind::shuttle) continue;
    if (prev) {
      for (int g = 1; g <= 4; ++g)
        worst = std::max(worst, std::abs(waveform_at(*prev, prev->duration_s, g) -
                                         waveform_at(s.segment, 0.0, g)));
    }
    prev = &s.segment;
  }
  return worst;
}

// --- schedule builder -------------------------------------------------------

struct StageDurations {
  double load_s = 2e-3;
  double init_s = 1e-3;
  double separate_s = 0.0;
  double close_s = 0.0;
  double psb_s = 500e-9;
  double freeze_s = 0.0;
  double measure_s = 0.0;
};

// One experiment cycle. Exactly one motion program applies:
//   loops > 0          multi-loop accumulated-distance program (D half/full
//                      periods forward plus backward at max frequency)
//   wait_at_x_nm >= 0  shuttle out at max frequency, hold, shuttle back
//   distance_nm > 0    symmetric forward+backward sweep; the total shuttle
//                      time tau_S sets the velocity (2d / tau_S)
//   otherwise          static DQD cycle (no shuttle stages)
struct ScheduleRequest {
  double magnetic_field_t = 0.8;
  double lambda_nm = 280.0;
  double u_lower_v = 0.150;
  bool crosstalk_compensation = true;
  double max_frequency_hz = 1e7;
  double usable_range_nm = 336.0;  // 1.2 * lambda

  double distance_nm = 0.0;
  double shuttle_time_ns = 0.0;    // total tau_S; 0 selects max_frequency_hz
  int loops = 0;                   // D
  double wait_at_x_nm = -1.0;
  double wait_at_ns = 0.0;
  double tau_dqd_ns = 0.0;

  StageDurations statics;
};

namespace detail {

inline ShuttleSegment make_segment(const ScheduleRequest& req, double frequency_hz,
                                   double duration_s, ShuttleDirection dir) {
  ShuttleSegment seg =
      req.crosstalk_compensation
          ? ShuttleSegment::with_crosstalk_compensation(req.u_lower_v)
          : [&] {
              ShuttleSegment s;
              s.amplitude_lower_v = req.u_lower_v;
              s.amplitude_upper_v = req.u_lower_v;
              return s;
            }();
  seg.frequency_hz = frequency_hz;
  seg.duration_s = duration_s;
  seg.direction = dir;
  seg.lambda_nm = req.lambda_nm;
  return seg;
}

}  // namespace detail

inline PulseSchedule build_schedule(const ScheduleRequest& req) {
  if (req.lambda_nm <= 0.0 || req.max_frequency_hz <= 0.0)
    throw std::invalid_argument("build_schedule: lambda and max frequency must be > 0");

  PulseSchedule sched;
  sched.magnetic_field_t = req.magnetic_field_t;
  auto& st = sched.stages;
  st.push_back(Stage::statics(StageKind::load, req.statics.load_s));
  st.push_back(Stage::statics(StageKind::init_i, req.statics.init_s));
  st.push_back(Stage::statics(StageKind::separate_s, req.statics.separate_s));
  st.push_back(Stage::statics(StageKind::close_t, req.statics.close_s));

  const double v_max_nm_per_s = req.max_frequency_hz * req.lambda_nm;

  if (req.loops > 0) {
    // D accumulated periods: floor(D/2) full loops plus a trailing
    // half-period loop when D is odd, all at max frequency.
    const double t_period = 1.0 / req.max_frequency_hz;
    for (int l = 0; l < req.loops / 2; ++l) {
      st.push_back(Stage::shuttle(detail::make_segment(
          req, req.max_frequency_hz, t_period, ShuttleDirection::forward)));
      st.push_back(Stage::shuttle(detail::make_segment(
          req, req.max_frequency_hz, t_period, ShuttleDirection::backward)));
    }
    if (req.loops % 2 == 1) {
      st.push_back(Stage::shuttle(detail::make_segment(
          req, req.max_frequency_hz, t_period / 2.0, ShuttleDirection::forward)));
      st.push_back(Stage::shuttle(detail::make_segment(
          req, req.max_frequency_hz, t_period / 2.0, ShuttleDirection::backward)));
    }
  } else if (req.wait_at_x_nm >= 0.0) {
    if (req.wait_at_x_nm > req.usable_range_nm)
      throw std::invalid_argument(
          "build_schedule: wait position " + io::format_double(req.wait_at_x_nm) +
          " nm beyond usable range " + io::format_double(req.usable_range_nm) + " nm");
    const double t_leg = req.wait_at_x_nm / v_max_nm_per_s;
    if (t_leg > 0.0)
      st.push_back(Stage::shuttle(detail::make_segment(
          req, req.max_frequency_hz, t_leg, ShuttleDirection::forward)));
    st.push_back(Stage::wait_at(req.wait_at_x_nm, req.wait_at_ns * 1e-9));
    if (t_leg > 0.0)
      st.push_back(Stage::shuttle(detail::make_segment(
          req, req.max_frequency_hz, t_leg, ShuttleDirection::backward)));
  } else if (req.distance_nm > 0.0) {
    if (req.distance_nm > req.usable_range_nm)
      throw std::invalid_argument(
          "build_schedule: distance " + io::format_double(req.distance_nm) +
          " nm beyond usable range " + io::format_double(req.usable_range_nm) +
          " nm (electron return probability collapses)");
    double frequency = req.max_frequency_hz;
    if (req.shuttle_time_ns > 0.0) {
      const double v = 2.0 * req.distance_nm / (req.shuttle_time_ns * 1e-9);
      frequency = v / req.lambda_nm;
      if (frequency > req.max_frequency_hz * (1.0 + 1e-9))
        throw std::invalid_argument(
            "build_schedule: tau_S too short for distance (requires v above "
            "maximum shuttle velocity)");
    }
    const double t_leg = req.distance_nm / (frequency * req.lambda_nm);
    st.push_back(Stage::shuttle(
        detail::make_segment(req, frequency, t_leg, ShuttleDirection::forward)));
    st.push_back(Stage::shuttle(
        detail::make_segment(req, frequency, t_leg, ShuttleDirection::backward)));
  }

  st.push_back(Stage::statics(StageKind::separate_s, req.statics.separate_s));
  if (req.tau_dqd_ns > 0.0) st.push_back(Stage::wait_dqd(req.tau_dqd_ns * 1e-9));
  st.push_back(Stage::statics(StageKind::psb_p, req.statics.psb_s));
  st.push_back(Stage::statics(StageKind::freeze_f, req.statics.freeze_s));
  st.push_back(Stage::statics(StageKind::measure_m, req.statics.measure_s));
  return sched;
}

// --- serialization ----------------------------------------------------------

inline nlohmann::json segment_to_json(const ShuttleSegment& s) {
  return {{"frequency_hz", s.frequency_hz},
          {"amplitude_lower_v", s.amplitude_lower_v},
          {"amplitude_upper_v", s.amplitude_upper_v},
          {"offsets_v", s.offsets_v},
          {"phases_rad", s.phases_rad},
          {"duration_s", s.duration_s},
          {"direction", s.direction == ShuttleDirection::forward ? "forward" : "backward"},
          {"lambda_nm", s.lambda_nm}};
}

inline ShuttleSegment segment_from_json(const nlohmann::json& j) {
  ShuttleSegment s;
  s.frequency_hz = j.at("frequency_hz").get<double>();
  s.amplitude_lower_v = j.at("amplitude_lower_v").get<double>();
  s.amplitude_upper_v = j.at("amplitude_upper_v").get<double>();
  s.offsets_v = j.at("offsets_v").get<std::array<double, 4>>();
  s.phases_rad = j.at("phases_rad").get<std::array<double, 4>>();
  s.duration_s = j.at("duration_s").get<double>();
  const auto dir = j.at("direction").get<std::string>();
  if (dir != "forward" && dir != "backward")
    throw std::invalid_argument("segment direction must be forward|backward");
  s.direction = dir == "forward" ? ShuttleDirection::forward : ShuttleDirection::backward;
  s.lambda_nm = j.at("lambda_nm").get<double>();
  return s;
}

inline nlohmann::json schedule_to_json(const PulseSchedule& sched) {
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& s : sched.stages) {
    nlohmann::json j = {{"kind", to_string(s.kind)}, {"duration_s", s.duration_s}};
    if (s.kind == StageKind::wait_at) j["x_nm"] = s.x_nm;
    if (s.kind == StageKind::shuttle) j["segment"] = segment_to_json(s.segment);
    stages.push_back(std::move(j));
  }
  return {{"magnetic_field_t", sched.magnetic_field_t}, {"stages", stages}};
}

inline PulseSchedule schedule_from_json(const nlohmann::json& j) {
  PulseSchedule sched;
  sched.magnetic_field_t = j.at("magnetic_field_t").get<double>();
  for (const auto& sj : j.at("stages")) {
    Stage s;
    s.kind = stage_kind_from_string(sj.at("kind").get<std::string>());
    s.duration_s = sj.at("duration_s").get<double>();
    if (s.kind == StageKind::wait_at) s.x_nm = sj.at("x_nm").get<double>();
    if (s.kind == StageKind::shuttle) {
      s.segment = segment_from_json(sj.at("segment"));
      s.duration_s = s.segment.duration_s;
    }
    sched.stages.push_back(std::move(s));
  }
  return sched;
}

// 4-column gate waveform (V_S1..V_S4) over the motion window, sampled at
// sample_rate_hz; waits hold the adjacent segment value.
inline io::CsvTable waveform_table(const PulseSchedule& sched, double sample_rate_hz = 1e9) {
  if (sample_rate_hz <= 0.0)
    throw std::invalid_argument("waveform_table: sample rate must be > 0");

  struct Window {
    double t0, t1;
    const Stage* stage;
  };
  std::vector<Window> windows;
  double t = 0.0;
  for (const auto& s : sched.stages) {
    if (s.kind == StageKind::shuttle || s.kind == StageKind::wait_at) {
      windows.push_back({t, t + s.duration_s, &s});
      t += s.duration_s;
    }
  }
  io::CsvTable table;
  table.header = {"V_S1", "V_S2", "V_S3", "V_S4"};
  if (windows.empty()) return table;

  auto value_at = [&](double time, int gate) {
    const Stage* hold_prev = nullptr;
    for (const auto& w : windows) {
      if (time <= w.t1) {
        if (w.stage->kind == StageKind::shuttle)
          return waveform_at(w.stage->segment, time - w.t0, gate);
        // wait: hold the boundary value of the neighbouring shuttle segment
        if (hold_prev)
          return waveform_at(hold_prev->segment, hold_prev->segment.duration_s, gate);
        for (const auto& w2 : windows)
          if (w2.stage->kind == StageKind::shuttle)
            return waveform_at(w2.stage->segment, 0.0, gate);
        return w.stage->segment.offsets_v[gate - 1];
      }
      if (w.stage->kind == StageKind::shuttle) hold_prev = w.stage;
    }
    return waveform_at(windows.back().stage->segment,
                       windows.back().stage->segment.duration_s, gate);
  };

  const double total = windows.back().t1;
  const auto n_samples = static_cast<std::size_t>(std::floor(total * sample_rate_hz)) + 1;
  table.rows.reserve(n_samples);
  for (std::size_t k = 0; k < n_samples; ++k) {
    const double time = std::min(static_cast<double>(k) / sample_rate_hz, total);
    table.rows.push_back({value_at(time, 1), value_at(time, 2), value_at(time, 3),
                          value_at(time, 4)});
  }
  return table;
}

}  // namespace shuttlesim
