#pragma once

#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "coffee/geom.hpp"

// Torque-free rigid-body tumbling: Euler's equations in the body frame with
// quaternion attitude kinematics, integrated by fixed-step RK4.

namespace coffee {

struct TumbleState {
  Rotation3 orientation;           // body (asteroid) frame w.r.t. inertial
  Vec3 omega = Vec3::Zero();       // body-frame angular velocity, rad/s
  Vec3 inertia = Vec3(1, 2, 3);    // principal moments, ascending
  double t = 0.0;                  // seconds

  void validate() const {
    if (!(inertia.x() > 0.0 && inertia.y() > inertia.x() &&
          inertia.z() > inertia.y()))
      throw ValidationError(
          "TumbleState: inertia must be strictly ascending positive");
  }

  double kinetic_energy() const {
    return 0.5 * omega.dot(inertia.cwiseProduct(omega));
  }

  Vec3 angular_momentum_body() const { return inertia.cwiseProduct(omega); }
};

namespace detail {

inline Vec3 omega_dot(const Vec3& omega, const Vec3& inertia) {
  const Vec3 l = inertia.cwiseProduct(omega);
  return l.cross(omega).cwiseQuotient(inertia);
}

inline Eigen::Vector4d quat_dot(const Eigen::Vector4d& q, const Vec3& omega) {
  // dq/dt = 0.5 * q ⊗ (0, omega) with body-frame omega; coefficients in
  // (w, x, y, z) order.
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  const double ox = omega.x(), oy = omega.y(), oz = omega.z();
  return 0.5 * Eigen::Vector4d(-x * ox - y * oy - z * oz,
                               w * ox + y * oz - z * oy,
                               w * oy - x * oz + z * ox,
                               w * oz + x * oy - y * ox);
}

}  // namespace detail

/// One RK4 step of the torque-free motion. dt may be negative (the
/// integrator is its own approximate inverse within one-step accuracy).
inline TumbleState step_tumble(const TumbleState& state, double dt) {
  state.validate();
  if (dt == 0.0) throw ValidationError("step_tumble: dt must be nonzero");

  const Vec3& inertia = state.inertia;
  const Eigen::Quaterniond& q0 = state.orientation.quat();
  Eigen::Vector4d q(q0.w(), q0.x(), q0.y(), q0.z());
  const Vec3 w0 = state.omega;

  const auto deriv = [&](const Eigen::Vector4d& qq, const Vec3& ww,
                         Eigen::Vector4d& dq, Vec3& dw) {
    dq = detail::quat_dot(qq, ww);
    dw = detail::omega_dot(ww, inertia);
  };

  Eigen::Vector4d k1q, k2q, k3q, k4q;
  Vec3 k1w, k2w, k3w, k4w;
  deriv(q, w0, k1q, k1w);
  deriv(q + 0.5 * dt * k1q, w0 + 0.5 * dt * k1w, k2q, k2w);
  deriv(q + 0.5 * dt * k2q, w0 + 0.5 * dt * k2w, k3q, k3w);
  deriv(q + dt * k3q, w0 + dt * k3w, k4q, k4w);

  const Eigen::Vector4d q1 =
      q + dt / 6.0 * (k1q + 2.0 * k2q + 2.0 * k3q + k4q);
  const Vec3 w1 = w0 + dt / 6.0 * (k1w + 2.0 * k2w + 2.0 * k3w + k4w);

  TumbleState next = state;
  next.orientation = Rotation3(q1[0], q1[1], q1[2], q1[3]);  // renormalizes
  next.omega = w1;
  next.t = state.t + dt;
  return next;
}

/// Integrate n fixed steps, returning all states including the initial one.
inline std::vector<TumbleState> integrate_tumble(const TumbleState& initial,
                                                 double dt, int steps) {
  std::vector<TumbleState> out;
  out.reserve(steps + 1);
  out.push_back(initial);
  for (int i = 0; i < steps; ++i) out.push_back(step_tumble(out.back(), dt));
  return out;
}

inline void save_trajectory(const std::vector<TumbleState>& states,
                            const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("save_trajectory: cannot open " + path);
  for (const TumbleState& s : states) {
    nlohmann::ordered_json row;
    row["t"] = s.t;
    const Eigen::Quaterniond& q = s.orientation.quat();
    row["q"] = {q.w(), q.x(), q.y(), q.z()};
    row["omega"] = {s.omega.x(), s.omega.y(), s.omega.z()};
    row["inertia"] = {s.inertia.x(), s.inertia.y(), s.inertia.z()};
    out << row.dump() << '\n';
  }
  if (!out) throw IoError("save_trajectory: write failed for " + path);
}

inline std::vector<TumbleState> load_trajectory(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("load_trajectory: cannot open " + path);
  std::vector<TumbleState> states;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto row = nlohmann::json::parse(line, nullptr, false);
    if (row.is_discarded())
      throw IoError("load_trajectory: malformed JSON line");
    TumbleState s;
    s.t = row.at("t").get<double>();
    const auto& q = row.at("q");
    s.orientation =
        Rotation3(q.at(0).get<double>(), q.at(1).get<double>(),
                  q.at(2).get<double>(), q.at(3).get<double>());
    const auto& w = row.at("omega");
    s.omega = Vec3(w.at(0).get<double>(), w.at(1).get<double>(),
                   w.at(2).get<double>());
    const auto& ii = row.at("inertia");
    s.inertia = Vec3(ii.at(0).get<double>(), ii.at(1).get<double>(),
                     ii.at(2).get<double>());
    states.push_back(s);
  }
  return states;
}

}  // namespace coffee
