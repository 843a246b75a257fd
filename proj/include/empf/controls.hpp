#pragma once

// DER behavior under droop (primary) control and the secondary modes
// RPS (reactive power sharing), VR (voltage regulation) and ST (smart tuning).
//
// Frequency is per-unit of the case's nominal frequency throughout; droop
// coefficient m is therefore p.u. frequency per p.u. real power.

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "empf/errors.hpp"

namespace empf {

enum class ControlMode { DP, RPS, VR, ST };

inline const char* to_string(ControlMode mode) {
    switch (mode) {
        case ControlMode::DP: return "dp";
        case ControlMode::RPS: return "rps";
        case ControlMode::VR: return "vr";
        case ControlMode::ST: return "st";
    }
    return "?";
}

inline std::optional<ControlMode> parse_mode(const std::string& s) {
    if (s == "dp" || s == "DP") return ControlMode::DP;
    if (s == "rps" || s == "RPS") return ControlMode::RPS;
    if (s == "vr" || s == "VR") return ControlMode::VR;
    if (s == "st" || s == "ST") return ControlMode::ST;
    return std::nullopt;
}

inline bool needs_leader(ControlMode mode) { return mode == ControlMode::RPS || mode == ControlMode::ST; }

struct DroopParams {
    int bus = 0;
    double m = 0.0;       // P/F droop, p.u. frequency per p.u. power
    double n = 0.0;       // Q/V droop, p.u. voltage per p.u. var
    double f0 = 1.0;      // no-load frequency setpoint, p.u.
    double v0 = 1.0;      // no-load voltage setpoint, p.u.
    double p_set = 0.0;   // P at f = f0
    double q_set = 0.0;   // Q at v = v0
    double q_star = 1.0;  // rated var output used for proportional sharing
    std::optional<double> p_max;
    std::optional<double> q_max;

    bool operator==(const DroopParams&) const = default;
};

/// Mutable secondary-loop quantities of one solver run. The per-DER vectors
/// are indexed like the DER parameter list; entries of DERs that the mode
/// does not put under voltage regulation are carried but unused.
struct ControlState {
    ControlMode mode = ControlMode::DP;
    std::optional<int> leader;
    double rho = 0.0;
    std::vector<double> v_d;
    std::vector<double> z_d;
    std::vector<double> q0;
};

inline double droop_real_power(const DroopParams& p, double f) { return p.p_set - (f - p.f0) / p.m; }

inline double droop_real_power_df(const DroopParams& p) { return -1.0 / p.m; }

inline double droop_reactive_power(const DroopParams& p, double v) { return p.q_set - (v - p.v0) / p.n; }

/// True when DER `bus` regulates its own voltage through a dummy bus.
inline bool is_vr_governed(const ControlState& s, int bus) {
    return s.mode == ControlMode::VR || (s.mode == ControlMode::ST && s.leader == bus);
}

/// True when DER `bus` injects the shared ratio rho times its rating.
inline bool is_rps_follower(const ControlState& s, int bus) {
    return (s.mode == ControlMode::RPS || s.mode == ControlMode::ST) && s.leader != bus;
}

/// rho <- rho + relaxation * (q_leader / q_leader_star - rho). A relaxation
/// of 1 assigns the leader's ratio directly.
inline ControlState update_rho(ControlState s, double q_leader, double q_leader_star, double relaxation = 1.0) {
    s.rho += relaxation * (q_leader / q_leader_star - s.rho);
    return s;
}

inline double rps_follower_q(const ControlState& s, const DroopParams& p) { return s.rho * p.q_star; }

/// Dummy-bus var law of DER `k`: Q = v / z_d (v_d + v_rated - 2 v) + q0.
inline double vr_q(const ControlState& s, std::size_t k, double v, double v_rated) {
    return v / s.z_d[k] * (s.v_d[k] + v_rated - 2.0 * v) + s.q0[k];
}

inline double vr_dq_dv(const ControlState& s, std::size_t k, double v, double v_rated) {
    return (s.v_d[k] + v_rated - 4.0 * v) / s.z_d[k];
}

/// v_d <- v_d + gain * (v_rated - v_der) for every VR-governed DER whose
/// voltage error is at least `tol`. `v_der` and `v_rated` are indexed like `ders`.
inline ControlState update_dummy_voltage(ControlState s, std::span<const DroopParams> ders,
                                         std::span<const double> v_der, std::span<const double> v_rated,
                                         double gain = 1.0, double tol = 0.0) {
    for (std::size_t k = 0; k < ders.size(); ++k) {
        if (!is_vr_governed(s, ders[k].bus)) continue;
        const double err = v_rated[k] - v_der[k];
        if (std::abs(err) >= tol) s.v_d[k] += gain * err;
    }
    return s;
}

/// Sensitivity-scaled variant: the increment solves S * dv_d = (v_rated - v_der)
/// over the DERs whose error is at least `tol`, where S(a, b) = dv_der[a] / dv_d[b]
/// is indexed like `ders`. Other entries stay unchanged.
inline ControlState update_dummy_voltage_scaled(ControlState s, std::span<const DroopParams> ders,
                                                std::span<const double> v_der, std::span<const double> v_rated,
                                                const Eigen::MatrixXd& sensitivity, double gain = 1.0,
                                                double tol = 0.0) {
    std::vector<Eigen::Index> active;
    for (std::size_t k = 0; k < ders.size(); ++k) {
        if (is_vr_governed(s, ders[k].bus) && std::abs(v_rated[k] - v_der[k]) >= tol) {
            active.push_back(static_cast<Eigen::Index>(k));
        }
    }
    if (active.empty()) return s;
    const auto na = static_cast<Eigen::Index>(active.size());
    Eigen::MatrixXd sub(na, na);
    Eigen::VectorXd err(na);
    for (Eigen::Index a = 0; a < na; ++a) {
        err(a) = v_rated[active[a]] - v_der[active[a]];
        for (Eigen::Index b = 0; b < na; ++b) sub(a, b) = sensitivity(active[a], active[b]);
    }
    const Eigen::VectorXd step = sub.partialPivLu().solve(err);
    if (!step.allFinite()) throw SingularJacobian("dummy-bus sensitivity is singular");
    for (Eigen::Index a = 0; a < na; ++a) s.v_d[active[a]] += gain * step(a);
    return s;
}

/// Var output of DER `k` under the active mode.
inline double der_reactive_power(const ControlState& s, std::size_t k, const DroopParams& p, double v,
                                 double v_rated) {
    if (is_vr_governed(s, p.bus)) return vr_q(s, k, v, v_rated);
    if (is_rps_follower(s, p.bus)) return rps_follower_q(s, p);
    return droop_reactive_power(p, v);
}

/// dQ^G/dV of DER `k`: -1/n under droop, 0 for followers, the dummy-bus slope under VR.
inline double dq_dv_diagonal(const ControlState& s, std::size_t k, const DroopParams& p, double v,
                             double v_rated) {
    if (is_vr_governed(s, p.bus)) return vr_dq_dv(s, k, v, v_rated);
    if (is_rps_follower(s, p.bus)) return 0.0;
    return -1.0 / p.n;
}

}  // namespace empf
