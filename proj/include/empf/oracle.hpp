#pragma once

// Verification machinery for the test suite and `validate --audit`:
// finite-difference Jacobians, a bisection-based 2-bus solver and an
// independent residual audit. Nothing here is used by the solve path.

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "empf/controls.hpp"
#include "empf/errors.hpp"
#include "empf/netmodel.hpp"
#include "empf/solver.hpp"

namespace empf::oracle {

struct FdConfig {
    double h = 1e-6;
};

/// Central-difference Jacobian of assemble_mismatch with rho and V_d frozen,
/// column by column in StateLayout order.
inline Eigen::MatrixXd fd_jacobian(const PowerFlowModel& model, const ControlState& ctl, const StateVector& x,
                                   const FdConfig& cfg = {}) {
    if (!(cfg.h > 0.0)) throw Error("finite-difference step must be positive");
    const auto& lay = model.layout;
    const auto n = static_cast<Eigen::Index>(lay.size());
    const Eigen::VectorXd base = lay.pack(x);
    Eigen::MatrixXd jac(n, n);
    StateVector xp = x;
    StateVector xm = x;
    for (Eigen::Index c = 0; c < n; ++c) {
        Eigen::VectorXd up = base;
        Eigen::VectorXd dn = base;
        up(c) += cfg.h;
        dn(c) -= cfg.h;
        lay.unpack(up, xp);
        lay.unpack(dn, xm);
        jac.col(c) = (assemble_mismatch(model, ctl, xp) - assemble_mismatch(model, ctl, xm)) / (2.0 * cfg.h);
    }
    return jac;
}

/// True where assemble_jacobian is meant to equal the true derivative. The
/// balance row's theta and V blocks are zero by construction unless the
/// exact loss Jacobian is requested.
inline Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> analytic_mask(const PowerFlowModel& model,
                                                                         bool exact_loss = false) {
    const auto& lay = model.layout;
    const auto n = static_cast<Eigen::Index>(lay.size());
    Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> mask =
        Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic>::Constant(n, n, true);
    if (!exact_loss) {
        for (Eigen::Index c = 0; c < n; ++c) {
            if (c != lay.f_col()) mask(lay.balance_row(), c) = false;
        }
    }
    return mask;
}

/// Y-bus assembled straight from the in-service branches, rectangular.
inline Eigen::MatrixXcd rectangular_admittance(const NetworkCase& net) {
    const auto n = static_cast<Eigen::Index>(net.size());
    Eigen::MatrixXcd y = Eigen::MatrixXcd::Zero(n, n);
    for (const auto& br : net.branches()) {
        if (br.is_switch && !br.closed) continue;
        const auto a = static_cast<Eigen::Index>(net.index_of(br.from_bus));
        const auto b = static_cast<Eigen::Index>(net.index_of(br.to_bus));
        const Complex ys = 1.0 / Complex(br.r, br.x);
        y(a, a) += ys;
        y(b, b) += ys;
        y(a, b) -= ys;
        y(b, a) -= ys;
    }
    return y;
}

/// S_i = V_i conj(sum_j Y_ij V_j) with phasors in rectangular form.
inline std::vector<Complex> rectangular_injections(const Eigen::MatrixXcd& y, const std::vector<double>& theta,
                                                   const std::vector<double>& v) {
    const auto n = static_cast<Eigen::Index>(v.size());
    Eigen::VectorXcd phasor(n);
    for (Eigen::Index i = 0; i < n; ++i) phasor(i) = std::polar(v[i], theta[i]);
    const Eigen::VectorXcd current = y * phasor;
    std::vector<Complex> s(v.size());
    for (Eigen::Index i = 0; i < n; ++i) s[i] = phasor(i) * std::conj(current(i));
    return s;
}

struct TwoBusSolution {
    double v1 = 0.0;
    double v2 = 0.0;
    double theta2 = 0.0;
    double f = 0.0;
    double p1 = 0.0;
    double q1 = 0.0;
};

struct TwoBusLoad {
    double p = 0.0;
    double q = 0.0;
};

struct TwoBusBranch {
    double r = 0.0;
    double x = 0.0;
};

namespace detail {

// For a trial V2 (taken as the angle reference), the sending end follows from
// the load current in closed form; returns the bus-1 var droop residual.
struct SendingEnd {
    Complex v1;
    Complex s1;
};

inline SendingEnd sending_end(double v2, const TwoBusLoad& load, const TwoBusBranch& br) {
    const Complex current = std::conj(Complex(load.p, load.q) / v2);
    const Complex v1 = v2 + Complex(br.r, br.x) * current;
    return {v1, v1 * std::conj(current)};
}

inline double q_residual(const DroopParams& der, double v2, const TwoBusLoad& load, const TwoBusBranch& br) {
    const auto se = sending_end(v2, load, br);
    return droop_reactive_power(der, std::abs(se.v1)) - se.s1.imag();
}

}  // namespace detail

/// One droop DER at bus 1 (reference, theta = 0) feeding a PQ load at bus 2.
/// Bisects V2 on [0.5, 1.1] to 1e-10 using the high-voltage root; throws
/// NoSolution when no bracket exists.
inline TwoBusSolution brute_force_2bus(const DroopParams& der, const TwoBusLoad& load, const TwoBusBranch& br) {
    constexpr double lo_limit = 0.5;
    constexpr double hi_limit = 1.1;
    constexpr int scan_points = 600;
    constexpr double width = 1e-10;

    double hi = hi_limit;
    double g_hi = detail::q_residual(der, hi, load, br);
    double lo = hi;
    bool bracketed = g_hi == 0.0;
    for (int k = 1; k <= scan_points && !bracketed; ++k) {
        const double v = hi_limit - (hi_limit - lo_limit) * k / scan_points;
        const double g = detail::q_residual(der, v, load, br);
        if (!std::isfinite(g)) break;
        if ((g <= 0.0) != (g_hi <= 0.0)) {
            lo = v;
            bracketed = true;
            break;
        }
        hi = v;
        g_hi = g;
    }
    if (!bracketed) throw NoSolution("2-bus load is beyond deliverability in [0.5, 1.1]");

    if (g_hi != 0.0) {
        while (hi - lo > width) {
            const double mid = 0.5 * (lo + hi);
            const double g = detail::q_residual(der, mid, load, br);
            if ((g <= 0.0) == (g_hi <= 0.0)) {
                hi = mid;
                g_hi = g;
            } else {
                lo = mid;
            }
        }
        hi = 0.5 * (lo + hi);
    }

    const auto se = detail::sending_end(hi, load, br);
    TwoBusSolution out;
    out.v2 = hi;
    out.v1 = std::abs(se.v1);
    out.theta2 = -std::arg(se.v1);
    out.p1 = se.s1.real();
    out.q1 = se.s1.imag();
    out.f = der.f0 - der.m * (out.p1 - der.p_set);
    return out;
}

struct AuditCheck {
    std::string name;
    bool passed = true;
    double worst = 0.0;
    double tolerance = 0.0;
};

struct AuditReport {
    std::vector<AuditCheck> checks;
    double max_residual = 0.0;

    bool passed() const {
        for (const auto& c : checks) {
            if (!c.passed) return false;
        }
        return true;
    }
};

struct AuditTolerances {
    double residual = 1e-5;
    double sharing = 1e-3;
    double recovery = 1e-4;
    double droop = 1e-9;
};

/// Recomputes every mismatch of `sol` from scratch and checks the converged-state
/// invariants that apply to its mode.
inline AuditReport audit_solution(const NetworkCase& net, const std::vector<DroopParams>& ders,
                                  const PowerFlowSolution& sol, const AuditTolerances& tol = {}) {
    AuditReport report;
    const auto n = net.size();
    if (sol.state.v.size() != n || sol.state.theta.size() != n || sol.der_injections.size() != ders.size()) {
        report.checks.push_back({"shape", false, std::numeric_limits<double>::infinity(), 0.0});
        report.max_residual = std::numeric_limits<double>::infinity();
        return report;
    }
    const auto& ctl = sol.control;
    const double f = sol.state.f;

    std::vector<double> p_gen(n, 0.0);
    std::vector<double> q_gen(n, 0.0);
    std::vector<double> q_ratio;
    double droop_err = 0.0;
    double recovery_err = 0.0;
    bool has_recovery = false;
    for (std::size_t k = 0; k < ders.size(); ++k) {
        const auto& d = ders[k];
        const auto i = net.index_of(d.bus);
        const double v = sol.state.v[i];
        const double v_rated = net.bus(i).v_rated;
        p_gen[i] = d.p_set + (d.f0 - f) / d.m;
        droop_err = std::max(droop_err, std::abs(sol.der_injections[k].p - p_gen[i]));

        const bool vr = ctl.mode == ControlMode::VR || (ctl.mode == ControlMode::ST && ctl.leader == d.bus);
        const bool follower =
            (ctl.mode == ControlMode::RPS || ctl.mode == ControlMode::ST) && ctl.leader != d.bus;
        if (vr) {
            q_gen[i] = v * (ctl.v_d[k] + v_rated - 2.0 * v) / ctl.z_d[k] + ctl.q0[k];
            recovery_err = std::max(recovery_err, std::abs(v - v_rated));
            has_recovery = true;
        } else if (follower) {
            q_gen[i] = ctl.rho * d.q_star;
        } else {
            q_gen[i] = d.q_set + (d.v0 - v) / d.n;
        }
        if (ctl.mode == ControlMode::RPS || (ctl.mode == ControlMode::ST && follower)) {
            q_ratio.push_back(q_gen[i] / d.q_star);
        }
    }
    for (std::size_t i = 0; i < n; ++i) {
        if (net.bus(i).kind == BusKind::PV) p_gen[i] = net.bus(i).p_gen;
    }

    const auto s = rectangular_injections(rectangular_admittance(net), sol.state.theta, sol.state.v);
    double residual = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const auto& b = net.bus(i);
        residual = std::max(residual, std::abs(p_gen[i] - b.p_load - s[i].real()));
        if (b.kind != BusKind::PV) residual = std::max(residual, std::abs(q_gen[i] - b.q_load - s[i].imag()));
    }
    report.max_residual = residual;
    report.checks.push_back({"power balance", residual < tol.residual, residual, tol.residual});
    report.checks.push_back({"droop frequency law", droop_err < tol.droop, droop_err, tol.droop});

    if (q_ratio.size() > 1) {
        const auto [mn, mx] = std::minmax_element(q_ratio.begin(), q_ratio.end());
        const double spread = *mx - *mn;
        report.checks.push_back({"sharing ratio", spread < tol.sharing, spread, tol.sharing});
    }
    if (has_recovery) {
        report.checks.push_back({"voltage recovery", recovery_err < tol.recovery, recovery_err, tol.recovery});
    }
    return report;
}

}  // namespace empf::oracle
