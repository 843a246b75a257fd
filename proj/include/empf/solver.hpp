#pragma once

// Augmented Newton power flow for islanded microgrids. System frequency is an
// unknown next to the bus angles and magnitudes; a system-wide real power
// balance row closes the system in place of the reference bus's P row.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "empf/controls.hpp"
#include "empf/errors.hpp"
#include "empf/netmodel.hpp"

namespace empf {

enum class VdUpdate {
    Additive,     // v_d += gain * (v_rated - v_der)
    Sensitivity,  // same error, scaled by the inverse of dv_der/dv_d from the Jacobian
};

struct SolverOptions {
    double tol_vtheta = 1e-5;
    double tol_f_rho = 1e-3;
    double tol_vd = 1e-4;
    int max_iter = 100;
    double vd_gain = 1.0;
    VdUpdate vd_update = VdUpdate::Sensitivity;
    double step_limit = 0.2;
    // Below this max mismatch the |dV| clamp is lifted.
    double step_limit_release = 1e-2;
    // Adds the loss sensitivities to the balance row. Off reproduces the
    // zero theta/V blocks of the published Jacobian.
    bool exact_loss_jacobian = false;
    // Relaxation of the rho refresh; unset selects q*_leader / sum(q*).
    std::optional<double> rho_relaxation;
    bool throw_on_nonconvergence = true;
};

/// Secondary-control selection as written in a case file or on the command line.
struct ControlConfig {
    ControlMode mode = ControlMode::DP;
    std::optional<int> leader;
    double z_d = 1e-3;

    bool operator==(const ControlConfig&) const = default;
};

/// Bus-indexed state: angles (reference entry 0), magnitudes (PV entries at
/// v_set) and frequency in p.u. of nominal.
struct StateVector {
    std::vector<double> theta;
    std::vector<double> v;
    double f = 1.0;
};

/// Maps buses to rows/columns of the mismatch vector and Jacobian.
///
/// Columns: [theta of non-reference buses | V of non-PV buses | f].
/// Rows:    [P of non-reference buses     | Q of non-PV buses | balance].
class StateLayout {
  public:
    static constexpr long none = -1;

    StateLayout() = default;

    explicit StateLayout(const NetworkCase& net) : n_(net.size()) {
        auto ref = net.reference_index();
        if (!ref) throw Error("case has no reference bus");
        ref_ = *ref;
        theta_col_.assign(n_, none);
        v_col_.assign(n_, none);
        long next = 0;
        for (std::size_t i = 0; i < n_; ++i) {
            if (i != ref_) theta_col_[i] = next++;
        }
        for (std::size_t i = 0; i < n_; ++i) {
            if (net.bus(i).kind != BusKind::PV) v_col_[i] = next++;
        }
        f_col_ = next++;
        size_ = static_cast<std::size_t>(next);
    }

    std::size_t buses() const { return n_; }
    std::size_t size() const { return size_; }
    std::size_t reference() const { return ref_; }
    long theta_col(std::size_t bus) const { return theta_col_[bus]; }
    long v_col(std::size_t bus) const { return v_col_[bus]; }
    long f_col() const { return f_col_; }
    // Rows share the column numbering: P_i pairs with theta_i, Q_i with V_i.
    long p_row(std::size_t bus) const { return theta_col_[bus]; }
    long q_row(std::size_t bus) const { return v_col_[bus]; }
    long balance_row() const { return f_col_; }

    Eigen::VectorXd pack(const StateVector& x) const {
        Eigen::VectorXd out(size_);
        for (std::size_t i = 0; i < n_; ++i) {
            if (theta_col_[i] != none) out(theta_col_[i]) = x.theta[i];
            if (v_col_[i] != none) out(v_col_[i]) = x.v[i];
        }
        out(f_col_) = x.f;
        return out;
    }

    /// Writes packed unknowns into `x`, leaving the reference angle and PV magnitudes untouched.
    void unpack(const Eigen::VectorXd& packed, StateVector& x) const {
        for (std::size_t i = 0; i < n_; ++i) {
            if (theta_col_[i] != none) x.theta[i] = packed(theta_col_[i]);
            if (v_col_[i] != none) x.v[i] = packed(v_col_[i]);
        }
        x.f = packed(f_col_);
    }

  private:
    std::size_t n_ = 0;
    std::size_t ref_ = 0;
    std::size_t size_ = 0;
    std::vector<long> theta_col_;
    std::vector<long> v_col_;
    long f_col_ = 0;
};

/// Everything about a case that stays fixed during a solve.
struct PowerFlowModel {
    NetworkCase net;
    AdmittanceMatrix y;
    std::vector<DroopParams> ders;
    StateLayout layout;
    std::vector<long> der_of_bus;  // DER index per bus, or -1

    PowerFlowModel(NetworkCase case_, std::vector<DroopParams> ders_)
        : net(std::move(case_)), ders(std::move(ders_)) {
        if (ders.empty()) throw NoDer("case has no DER bus");
        layout = StateLayout(net);
        y = build_admittance(net);
        der_of_bus.assign(net.size(), -1);
        for (std::size_t k = 0; k < ders.size(); ++k) {
            const auto i = net.index_of(ders[k].bus);
            if (net.bus(i).kind != BusKind::DER) {
                throw Error("DER parameters given for non-DER bus " + std::to_string(ders[k].bus));
            }
            der_of_bus[i] = static_cast<long>(k);
        }
        for (std::size_t i = 0; i < net.size(); ++i) {
            if (net.bus(i).kind == BusKind::DER && der_of_bus[i] < 0) {
                throw Error("DER bus " + std::to_string(net.bus(i).id) + " has no droop parameters");
            }
        }
    }

    std::size_t der_index(int bus_id) const {
        for (std::size_t k = 0; k < ders.size(); ++k)
            if (ders[k].bus == bus_id) return k;
        throw Error("bus " + std::to_string(bus_id) + " is not a DER bus");
    }

    double v_rated_of_der(std::size_t k) const { return net.bus(net.index_of(ders[k].bus)).v_rated; }

    /// Flat start: V at rated (v_set on PV buses), all angles 0, f = 1 p.u.
    StateVector flat_start() const {
        StateVector x{std::vector<double>(net.size(), 0.0), std::vector<double>(net.size(), 1.0), 1.0};
        for (std::size_t i = 0; i < net.size(); ++i) {
            const auto& b = net.bus(i);
            x.v[i] = b.kind == BusKind::PV ? b.v_set : b.v_rated;
        }
        return x;
    }
};

/// Real generation at bus `i` for the state.
inline double bus_p_generation(const PowerFlowModel& model, std::size_t i, double f) {
    const auto& b = model.net.bus(i);
    if (b.kind == BusKind::PV) return b.p_gen;
    if (b.kind == BusKind::DER) return droop_real_power(model.ders[model.der_of_bus[i]], f);
    return 0.0;
}

inline double bus_q_generation(const PowerFlowModel& model, const ControlState& ctl, std::size_t i, double v) {
    const auto& b = model.net.bus(i);
    if (b.kind != BusKind::DER) return 0.0;
    const auto k = static_cast<std::size_t>(model.der_of_bus[i]);
    return der_reactive_power(ctl, k, model.ders[k], v, b.v_rated);
}

inline void check_state(const PowerFlowModel& model, const StateVector& x) {
    if (x.theta.size() != model.net.size() || x.v.size() != model.net.size()) {
        throw DimensionMismatch("state vector does not match the " + std::to_string(model.net.size()) +
                                "-bus case");
    }
}

/// Mismatch F = generation - load - network injection, row order per StateLayout.
inline Eigen::VectorXd assemble_mismatch(const PowerFlowModel& model, const ControlState& ctl,
                                         const StateVector& x) {
    check_state(model, x);
    const auto& lay = model.layout;
    const auto inj = network_injections(model.y, x.theta, x.v);
    Eigen::VectorXd out(lay.size());
    double p_gen_total = 0.0;
    double p_load_total = 0.0;
    double losses = 0.0;
    for (std::size_t i = 0; i < lay.buses(); ++i) {
        const auto& b = model.net.bus(i);
        const double pg = bus_p_generation(model, i, x.f);
        p_gen_total += pg;
        p_load_total += b.p_load;
        losses += inj.p[i];
        if (lay.p_row(i) != StateLayout::none) out(lay.p_row(i)) = pg - b.p_load - inj.p[i];
        if (lay.q_row(i) != StateLayout::none) {
            out(lay.q_row(i)) = bus_q_generation(model, ctl, i, x.v[i]) - b.q_load - inj.q[i];
        }
    }
    out(lay.balance_row()) = p_gen_total - (p_load_total + losses);
    return out;
}

/// Partials of the network injections with respect to every bus angle and magnitude.
struct InjectionPartials {
    Eigen::MatrixXd dp_dtheta, dp_dv, dq_dtheta, dq_dv;
};

inline InjectionPartials injection_partials(const AdmittanceMatrix& y, std::span<const double> theta,
                                            std::span<const double> v) {
    const auto n = static_cast<Eigen::Index>(y.n);
    InjectionPartials d{Eigen::MatrixXd::Zero(n, n), Eigen::MatrixXd::Zero(n, n), Eigen::MatrixXd::Zero(n, n),
                        Eigen::MatrixXd::Zero(n, n)};
    for (Eigen::Index i = 0; i < n; ++i) {
        double p_sum = 0.0;  // sum_j V_j |Y_ij| cos(.)
        double q_sum = 0.0;
        for (Eigen::Index j = 0; j < n; ++j) {
            const double m = y.mag(i, j);
            if (m == 0.0) continue;
            const double phi = theta[i] - theta[j] - y.ang(i, j);
            const double c = m * std::cos(phi);
            const double s = m * std::sin(phi);
            p_sum += v[j] * c;
            q_sum += v[j] * s;
            if (j != i) {
                d.dp_dtheta(i, j) = v[i] * v[j] * s;
                d.dq_dtheta(i, j) = -v[i] * v[j] * c;
                d.dp_dtheta(i, i) -= v[i] * v[j] * s;
                d.dq_dtheta(i, i) += v[i] * v[j] * c;
            }
            d.dp_dv(i, j) = v[i] * c;
            d.dq_dv(i, j) = v[i] * s;
        }
        d.dp_dv(i, i) += p_sum;
        d.dq_dv(i, i) += q_sum;
    }
    return d;
}

/// Jacobian of assemble_mismatch with rho and V_d held fixed. The balance
/// row carries only the frequency entry unless `exact_loss` is set.
inline Eigen::MatrixXd assemble_jacobian(const PowerFlowModel& model, const ControlState& ctl,
                                         const StateVector& x, bool exact_loss = false) {
    check_state(model, x);
    const auto& lay = model.layout;
    const auto d = injection_partials(model.y, x.theta, x.v);
    Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(lay.size(), lay.size());
    const std::size_t n = lay.buses();
    double dpgs_df = 0.0;

    for (std::size_t i = 0; i < n; ++i) {
        const auto& b = model.net.bus(i);
        const long pr = lay.p_row(i);
        const long qr = lay.q_row(i);
        for (std::size_t j = 0; j < n; ++j) {
            const long tc = lay.theta_col(j);
            const long vc = lay.v_col(j);
            if (tc != StateLayout::none) {
                if (pr != StateLayout::none) jac(pr, tc) = -d.dp_dtheta(i, j);
                if (qr != StateLayout::none) jac(qr, tc) = -d.dq_dtheta(i, j);
                if (exact_loss) jac(lay.balance_row(), tc) -= d.dp_dtheta(i, j);
            }
            if (vc != StateLayout::none) {
                if (pr != StateLayout::none) jac(pr, vc) = -d.dp_dv(i, j);
                if (qr != StateLayout::none) jac(qr, vc) = -d.dq_dv(i, j);
                if (exact_loss) jac(lay.balance_row(), vc) -= d.dp_dv(i, j);
            }
        }
        if (b.kind == BusKind::DER) {
            const auto k = static_cast<std::size_t>(model.der_of_bus[i]);
            const double dpdf = droop_real_power_df(model.ders[k]);
            dpgs_df += dpdf;
            if (pr != StateLayout::none) jac(pr, lay.f_col()) = dpdf;
            if (qr != StateLayout::none) {
                jac(qr, lay.v_col(i)) += dq_dv_diagonal(ctl, k, model.ders[k], x.v[i], b.v_rated);
            }
        }
    }
    jac(lay.balance_row(), lay.f_col()) = dpgs_df;
    return jac;
}

/// LU factorization with partial pivoting of a Newton Jacobian.
class JacobianFactor {
  public:
    explicit JacobianFactor(const Eigen::MatrixXd& jac) {
        if (jac.rows() != jac.cols()) {
            throw DimensionMismatch("Jacobian is " + std::to_string(jac.rows()) + "x" +
                                    std::to_string(jac.cols()));
        }
        lu_.compute(jac);
        const double scale = jac.size() ? jac.cwiseAbs().maxCoeff() : 0.0;
        const double pivot = jac.size() ? lu_.matrixLU().diagonal().cwiseAbs().minCoeff() : 0.0;
        if (!(scale > 0.0) || !(pivot > scale * 1e-13)) {
            throw SingularJacobian("Jacobian is singular to working precision");
        }
    }

    Eigen::VectorXd solve(const Eigen::VectorXd& rhs) const {
        if (rhs.size() != lu_.rows()) {
            throw DimensionMismatch("right-hand side has " + std::to_string(rhs.size()) + " entries for a " +
                                    std::to_string(lu_.rows()) + "-row Jacobian");
        }
        Eigen::VectorXd x = lu_.solve(rhs);
        if (!x.allFinite()) throw SingularJacobian("Newton step is not finite");
        return x;
    }

  private:
    Eigen::PartialPivLU<Eigen::MatrixXd> lu_;
};

/// Solves J * dx = rhs.
inline Eigen::VectorXd newton_step(const Eigen::MatrixXd& jac, const Eigen::VectorXd& rhs) {
    if (jac.rows() != rhs.size()) {
        throw DimensionMismatch("Jacobian has " + std::to_string(jac.rows()) + " rows but the right-hand side has " +
                                std::to_string(rhs.size()) + " entries");
    }
    return JacobianFactor(jac).solve(rhs);
}

struct DerInjection {
    int bus = 0;
    double p = 0.0;
    double q = 0.0;
    bool p_limit_exceeded = false;
    bool q_limit_exceeded = false;
};

struct PowerFlowSolution {
    ControlMode mode = ControlMode::DP;
    std::vector<int> bus_ids;
    StateVector state;
    std::vector<DerInjection> der_injections;
    std::vector<BranchFlow> branch_flows;
    double losses = 0.0;
    double f_hz = 0.0;
    int iterations = 0;
    int bootstrap_iterations = 0;  // droop-only iterations included in `iterations`
    bool converged = false;
    std::vector<double> residual_history;
    double final_residual = 0.0;
    ControlState control;
};

namespace detail {

inline double max_abs(const Eigen::VectorXd& v) { return v.size() ? v.cwiseAbs().maxCoeff() : 0.0; }

inline double default_rho_relaxation(const PowerFlowModel& model, int leader) {
    double total = 0.0;
    for (const auto& d : model.ders) total += d.q_star;
    return model.ders[model.der_index(leader)].q_star / total;
}

/// dV_der / dV_d through the linearized network: column k is the V response
/// to a unit change of DER k's dummy voltage, restricted to the DER buses.
inline Eigen::MatrixXd dummy_voltage_sensitivity(const PowerFlowModel& model, const ControlState& ctl,
                                                 const StateVector& x, const JacobianFactor& factor) {
    const auto& lay = model.layout;
    const auto count = static_cast<Eigen::Index>(model.ders.size());
    Eigen::MatrixXd sens = Eigen::MatrixXd::Zero(count, count);
    for (Eigen::Index k = 0; k < count; ++k) {
        if (!is_vr_governed(ctl, model.ders[k].bus)) continue;
        const auto i = model.net.index_of(model.ders[k].bus);
        Eigen::VectorXd rhs = Eigen::VectorXd::Zero(lay.size());
        rhs(lay.q_row(i)) = -x.v[i] / ctl.z_d[k];
        const Eigen::VectorXd resp = factor.solve(rhs);
        for (Eigen::Index a = 0; a < count; ++a) {
            sens(a, k) = resp(lay.v_col(model.net.index_of(model.ders[a].bus)));
        }
    }
    return sens;
}

/// Refreshes rho and V_d from the state, as done between Newton iterations.
inline ControlState refresh_control(const PowerFlowModel& model, const ControlState& ctl, const StateVector& x,
                                    const SolverOptions& opts, const JacobianFactor& factor) {
    ControlState next = ctl;
    if (ctl.mode == ControlMode::VR || ctl.mode == ControlMode::ST) {
        std::vector<double> v_der(model.ders.size());
        std::vector<double> v_rated(model.ders.size());
        for (std::size_t k = 0; k < model.ders.size(); ++k) {
            const auto i = model.net.index_of(model.ders[k].bus);
            v_der[k] = x.v[i];
            v_rated[k] = model.net.bus(i).v_rated;
        }
        if (opts.vd_update == VdUpdate::Additive) {
            next = update_dummy_voltage(next, model.ders, v_der, v_rated, opts.vd_gain, opts.tol_vd);
        } else {
            const auto sens = dummy_voltage_sensitivity(model, ctl, x, factor);
            next = update_dummy_voltage_scaled(next, model.ders, v_der, v_rated, sens, opts.vd_gain, opts.tol_vd);
        }
    }
    if (needs_leader(ctl.mode)) {
        const auto k = model.der_index(*ctl.leader);
        const auto i = model.net.index_of(*ctl.leader);
        const double q_leader = der_reactive_power(ctl, k, model.ders[k], x.v[i], model.net.bus(i).v_rated);
        const double relax = opts.rho_relaxation.value_or(default_rho_relaxation(model, *ctl.leader));
        next = update_rho(next, q_leader, model.ders[k].q_star, relax);
    }
    return next;
}

/// Largest voltage error at VR-governed DERs.
inline double vd_error(const PowerFlowModel& model, const ControlState& ctl, const StateVector& x) {
    double err = 0.0;
    for (std::size_t k = 0; k < model.ders.size(); ++k) {
        if (!is_vr_governed(ctl, model.ders[k].bus)) continue;
        const auto i = model.net.index_of(model.ders[k].bus);
        err = std::max(err, std::abs(model.net.bus(i).v_rated - x.v[i]));
    }
    return err;
}

struct LoopResult {
    StateVector x;
    ControlState ctl;
    int iterations = 0;
    bool converged = false;
};

/// Newton iterations under `ctl`, refreshing rho/V_d between iterations.
/// Appends the pre-step max mismatch of every iteration to `history`.
inline LoopResult newton_loop(const PowerFlowModel& model, ControlState ctl, StateVector x,
                              const SolverOptions& opts, int max_iter, std::vector<double>& history) {
    const auto& lay = model.layout;
    LoopResult out;
    for (int it = 0; it < max_iter; ++it) {
        const Eigen::VectorXd mismatch = assemble_mismatch(model, ctl, x);
        const double residual = max_abs(mismatch);
        history.push_back(residual);
        const Eigen::MatrixXd jac = assemble_jacobian(model, ctl, x, opts.exact_loss_jacobian);
        const JacobianFactor factor(jac);
        Eigen::VectorXd dx = factor.solve(-mismatch);

        if (residual >= opts.step_limit_release) {
            for (std::size_t i = 0; i < lay.buses(); ++i) {
                const long c = lay.v_col(i);
                if (c != StateLayout::none) dx(c) = std::clamp(dx(c), -opts.step_limit, opts.step_limit);
            }
        }

        double d_theta = 0.0;
        double d_v = 0.0;
        for (std::size_t i = 0; i < lay.buses(); ++i) {
            if (lay.theta_col(i) != StateLayout::none) d_theta = std::max(d_theta, std::abs(dx(lay.theta_col(i))));
            if (lay.v_col(i) != StateLayout::none) d_v = std::max(d_v, std::abs(dx(lay.v_col(i))));
        }
        const double d_f = std::abs(dx(lay.f_col()));

        lay.unpack(lay.pack(x) + dx, x);
        for (std::size_t i = 0; i < lay.buses(); ++i) {
            if (!(x.v[i] > 0.0) || !std::isfinite(x.theta[i])) {
                throw SingularJacobian("Newton iterate left the feasible region at bus " +
                                       std::to_string(model.net.bus(i).id));
            }
        }
        ++out.iterations;

        const ControlState next = refresh_control(model, ctl, x, opts, factor);
        const double d_rho = std::abs(next.rho - ctl.rho);
        const double d_vd = vd_error(model, ctl, x);

        if (d_theta < opts.tol_vtheta && d_v < opts.tol_vtheta && d_f < opts.tol_f_rho && d_rho < opts.tol_f_rho &&
            d_vd < opts.tol_vd) {
            // Steps are small; accept once the frozen-control mismatch is too,
            // otherwise take another step without refreshing rho/V_d.
            if (max_abs(assemble_mismatch(model, ctl, x)) < opts.tol_vtheta) {
                out.converged = true;
                break;
            }
            continue;
        }
        ctl = next;
    }
    out.x = std::move(x);
    out.ctl = std::move(ctl);
    return out;
}

inline PowerFlowSolution make_solution(const PowerFlowModel& model, const LoopResult& run,
                                       std::vector<double> history, int bootstrap_iterations) {
    PowerFlowSolution sol;
    sol.mode = run.ctl.mode;
    sol.state = run.x;
    sol.control = run.ctl;
    sol.iterations = run.iterations + bootstrap_iterations;
    sol.bootstrap_iterations = bootstrap_iterations;
    sol.converged = run.converged;
    sol.residual_history = std::move(history);
    sol.final_residual = max_abs(assemble_mismatch(model, run.ctl, run.x));
    sol.f_hz = run.x.f * model.net.bases().f_nominal;
    for (const auto& b : model.net.buses()) sol.bus_ids.push_back(b.id);
    for (std::size_t k = 0; k < model.ders.size(); ++k) {
        const auto& d = model.ders[k];
        const auto i = model.net.index_of(d.bus);
        DerInjection inj{d.bus, droop_real_power(d, run.x.f),
                         der_reactive_power(run.ctl, k, d, run.x.v[i], model.net.bus(i).v_rated)};
        inj.p_limit_exceeded = d.p_max && std::abs(inj.p) > *d.p_max;
        inj.q_limit_exceeded = d.q_max && std::abs(inj.q) > *d.q_max;
        sol.der_injections.push_back(inj);
    }
    sol.branch_flows = branch_flows(model.net, run.x.theta, run.x.v);
    for (const auto& fl : sol.branch_flows) sol.losses += fl.loss().real();
    return sol;
}

inline void finish(const PowerFlowSolution& sol, const SolverOptions& opts) {
    if (!sol.converged && opts.throw_on_nonconvergence) {
        throw NotConverged(opts.max_iter, sol.residual_history);
    }
}

}  // namespace detail

/// Power flow with every DER under droop control, from a flat start.
inline PowerFlowSolution solve_droop(const NetworkCase& net, const std::vector<DroopParams>& ders,
                                     const SolverOptions& opts = {}) {
    PowerFlowModel model(net, ders);
    ControlState ctl;
    ctl.mode = ControlMode::DP;
    std::vector<double> history;
    auto run = detail::newton_loop(model, ctl, model.flat_start(), opts, opts.max_iter, history);
    auto sol = detail::make_solution(model, run, std::move(history), 0);
    detail::finish(sol, opts);
    return sol;
}

/// Initial secondary-control state taken from a converged droop solution:
/// Q0 is the droop var output, V_d makes the dummy-bus law reproduce it, and
/// rho is the leader's droop ratio.
inline ControlState initial_control(const PowerFlowModel& model, const ControlConfig& config,
                                    const PowerFlowSolution& droop) {
    ControlState ctl;
    ctl.mode = config.mode;
    ctl.leader = config.leader;
    const auto count = model.ders.size();
    ctl.z_d.assign(count, config.z_d);
    ctl.q0.resize(count);
    ctl.v_d.resize(count);
    for (std::size_t k = 0; k < count; ++k) {
        const auto i = model.net.index_of(model.ders[k].bus);
        const double v = droop.state.v[i];
        ctl.q0[k] = droop.der_injections[k].q;
        ctl.v_d[k] = 2.0 * v - model.net.bus(i).v_rated;
    }
    if (config.leader) {
        const auto k = model.der_index(*config.leader);
        ctl.rho = droop.der_injections[k].q / model.ders[k].q_star;
    }
    return ctl;
}

/// Full two-stage solve: droop-only bootstrap, then the requested secondary mode.
inline PowerFlowSolution solve(const NetworkCase& net, const std::vector<DroopParams>& ders,
                               const ControlConfig& config, const SolverOptions& opts = {}) {
    PowerFlowModel model(net, ders);
    if (needs_leader(config.mode)) {
        if (!config.leader) throw NoLeader("no leader designated for mode " + std::string(to_string(config.mode)));
        model.der_index(*config.leader);
    }
    if (!(config.z_d > 0.0)) throw Error("z_d must be positive");

    SolverOptions boot_opts = opts;
    boot_opts.throw_on_nonconvergence = false;
    std::vector<double> history;
    ControlState droop_ctl;
    auto boot = detail::newton_loop(model, droop_ctl, model.flat_start(), boot_opts, opts.max_iter, history);
    if (config.mode == ControlMode::DP || !boot.converged) {
        auto sol = detail::make_solution(model, boot, std::move(history), 0);
        sol.mode = config.mode;
        detail::finish(sol, opts);
        return sol;
    }
    const auto droop = detail::make_solution(model, boot, {}, 0);

    const ControlState ctl = initial_control(model, config, droop);
    auto run = detail::newton_loop(model, ctl, boot.x, opts, opts.max_iter - boot.iterations, history);
    auto sol = detail::make_solution(model, run, std::move(history), boot.iterations);
    detail::finish(sol, opts);
    return sol;
}

}  // namespace empf
