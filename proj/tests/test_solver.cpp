#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "empf/case33.hpp"
#include "empf/oracle.hpp"
#include "empf/solver.hpp"
#include "support.hpp"

using namespace empf;
using testing_support::random_six_bus;

namespace {

const ControlMode all_modes[] = {ControlMode::DP, ControlMode::RPS, ControlMode::VR, ControlMode::ST};

double max_abs(const Eigen::VectorXd& v) { return v.cwiseAbs().maxCoeff(); }

}  // namespace

TEST(Layout, Dimensions) {
    const auto c = builtin_case33(Topology::Radial);
    const StateLayout lay(c.network);
    EXPECT_EQ(lay.size(), 2u * 33u);
    EXPECT_EQ(lay.theta_col(0), StateLayout::none);
    EXPECT_EQ(lay.f_col(), 65);
}

TEST(Mismatch, ConvergedStateIsSmall) {
    const auto c = builtin_case33(Topology::Radial);
    const auto sol = solve_droop(c.network, c.ders);
    const PowerFlowModel model(c.network, c.ders);
    EXPECT_LT(max_abs(assemble_mismatch(model, sol.control, sol.state)), 1e-5);
}

TEST(Mismatch, ZeroLoadFlatStartIsZero) {
    auto c = builtin_case33(Topology::Meshed);
    std::vector<Bus> buses = c.network.buses();
    for (auto& b : buses) b.p_load = b.q_load = 0.0;
    const NetworkCase net(buses, c.network.branches(), c.network.bases());
    auto ders = c.ders;
    for (auto& d : ders) d.v0 = 1.0;
    const PowerFlowModel model(net, ders);
    ControlState ctl;
    const auto f = assemble_mismatch(model, ctl, model.flat_start());
    for (Eigen::Index i = 0; i < f.size(); ++i) EXPECT_NEAR(f(i), 0.0, 1e-12);
}

TEST(Mismatch, BalanceRowIsSumOfBusRows) {
    const auto sc = random_six_bus(3);
    const PowerFlowModel model(sc.net, sc.ders);
    std::mt19937 rng(11);
    const auto x = testing_support::random_state(model, rng);
    ControlState ctl;
    const auto f = assemble_mismatch(model, ctl, x);
    const auto inj = network_injections(model.y, x.theta, x.v);
    double sum = 0.0;
    for (std::size_t i = 0; i < sc.net.size(); ++i) {
        sum += bus_p_generation(model, i, x.f) - sc.net.bus(i).p_load - inj.p[i];
    }
    EXPECT_NEAR(f(model.layout.balance_row()), sum, 1e-12);
}

TEST(Mismatch, DimensionMismatch) {
    const auto sc = random_six_bus(3);
    const PowerFlowModel model(sc.net, sc.ders);
    StateVector x = model.flat_start();
    x.v.pop_back();
    EXPECT_THROW(assemble_mismatch(model, ControlState{}, x), DimensionMismatch);
}

TEST(Jacobian, FrequencyColumn) {
    const auto c = builtin_case33(Topology::Radial);
    const PowerFlowModel model(c.network, c.ders);
    const auto x = model.flat_start();
    const auto jac = assemble_jacobian(model, ControlState{}, x, false);
    const auto& lay = model.layout;
    double sum = 0.0;
    for (const auto& d : c.ders) sum += -1.0 / d.m;
    EXPECT_NEAR(jac(lay.balance_row(), lay.f_col()), sum, 1e-9);
    for (std::size_t i = 1; i < c.network.size(); ++i) {
        const bool is_der = c.network.bus(i).kind == BusKind::DER;
        const double expect = is_der ? -1.0 / c.ders[model.der_of_bus[i]].m : 0.0;
        EXPECT_EQ(jac(lay.p_row(i), lay.f_col()), expect);
    }
}

TEST(Jacobian, BalanceRowBlocksAreZero) {
    const auto sc = random_six_bus(5);
    const PowerFlowModel model(sc.net, sc.ders);
    std::mt19937 rng(2);
    const auto x = testing_support::random_state(model, rng);
    const auto jac = assemble_jacobian(model, ControlState{}, x, false);
    const auto fd = oracle::fd_jacobian(model, ControlState{}, x);
    const auto row = model.layout.balance_row();
    double fd_norm = 0.0;
    for (Eigen::Index c = 0; c < model.layout.f_col(); ++c) {
        EXPECT_EQ(jac(row, c), 0.0);
        fd_norm = std::max(fd_norm, std::abs(fd(row, c)));
    }
    EXPECT_GT(fd_norm, 1e-3);
}

TEST(Jacobian, MatchesFiniteDifferencesAllModes) {
    for (unsigned seed = 0; seed < 3; ++seed) {
        const auto sc = random_six_bus(seed);
        const PowerFlowModel model(sc.net, sc.ders);
        std::mt19937 rng(100 + seed);
        for (auto mode : all_modes) {
            for (bool exact : {false, true}) {
                const auto x = testing_support::random_state(model, rng);
                const auto ctl = testing_support::random_control(model, mode, rng);
                const auto jac = assemble_jacobian(model, ctl, x, exact);
                const auto fd = oracle::fd_jacobian(model, ctl, x);
                const auto mask = oracle::analytic_mask(model, exact);
                for (Eigen::Index r = 0; r < jac.rows(); ++r) {
                    for (Eigen::Index c = 0; c < jac.cols(); ++c) {
                        if (!mask(r, c)) continue;
                        EXPECT_NEAR(jac(r, c), fd(r, c), 1e-6 * std::max(1.0, std::abs(fd(r, c))))
                            << to_string(mode) << " r" << r << " c" << c;
                    }
                }
            }
        }
    }
}

TEST(NewtonStep, IdentitySolve) {
    const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(5, 5);
    for (int k = 0; k < 5; ++k) {
        const Eigen::VectorXd e = Eigen::VectorXd::Unit(5, k);
        EXPECT_EQ(newton_step(eye, e), e);
    }
}

TEST(NewtonStep, BackwardError) {
    const auto c = builtin_case33(Topology::Meshed);
    const PowerFlowModel model(c.network, c.ders);
    ControlState ctl;
    ctl.mode = ControlMode::VR;
    ctl.v_d.assign(5, 1.0);
    ctl.z_d.assign(5, 1e-3);
    ctl.q0.assign(5, 0.5);
    const auto x = model.flat_start();
    const auto jac = assemble_jacobian(model, ctl, x, false);
    const auto f = assemble_mismatch(model, ctl, x);
    const auto dx = newton_step(jac, f);
    EXPECT_LT(max_abs(jac * dx - f), 1e-10 * max_abs(f));
}

TEST(NewtonStep, Errors) {
    Eigen::MatrixXd sing = Eigen::MatrixXd::Zero(3, 3);
    sing(0, 0) = 1.0;
    EXPECT_THROW(newton_step(sing, Eigen::VectorXd::Ones(3)), SingularJacobian);
    EXPECT_THROW(newton_step(Eigen::MatrixXd::Identity(3, 3), Eigen::VectorXd::Ones(2)), DimensionMismatch);
}

TEST(NewtonStep, FirstFrequencyStepOpposesImbalance) {
    const auto c = builtin_case33(Topology::Radial);
    const PowerFlowModel model(c.network, c.ders);
    const auto x = model.flat_start();
    const auto f = assemble_mismatch(model, ControlState{}, x);
    const auto dx = newton_step(assemble_jacobian(model, ControlState{}, x, false), -f);
    const double imbalance = f(model.layout.balance_row());
    EXPECT_LT(imbalance, 0.0);
    EXPECT_LT(dx(model.layout.f_col()), 0.0);
}

TEST(SolveDroop, Case33IterationBudget) {
    for (auto topology : {Topology::Radial, Topology::Meshed}) {
        const auto c = builtin_case33(topology);
        const auto sol = solve_droop(c.network, c.ders);
        EXPECT_TRUE(sol.converged);
        EXPECT_LE(sol.iterations, 10);
        EXPECT_LT(sol.final_residual, 1e-5);
        EXPECT_EQ(sol.residual_history.size(), static_cast<std::size_t>(sol.iterations));
    }
}

TEST(SolveDroop, SymmetricThreeBus) {
    std::vector<Bus> buses(3);
    for (int k = 0; k < 3; ++k) buses[k].id = k + 1;
    buses[0].kind = BusKind::DER;
    buses[0].is_reference = true;
    buses[1].kind = BusKind::DER;
    buses[2].p_load = 0.8;
    buses[2].q_load = 0.3;
    const NetworkCase net(buses, {{1, 3, 0.02, 0.05, false, true}, {2, 3, 0.02, 0.05, false, true}});
    DroopParams d;
    d.bus = 1;
    d.m = 0.01;
    d.n = 0.05;
    DroopParams e = d;
    e.bus = 2;
    const auto sol = solve_droop(net, {d, e}, testing_support::tight_options());
    EXPECT_NEAR(sol.state.v[0], sol.state.v[1], 1e-10);
    EXPECT_NEAR(sol.der_injections[0].p, sol.der_injections[1].p, 1e-10);
    EXPECT_NEAR(sol.state.theta[1], 0.0, 1e-10);
}

TEST(SolveDroop, NoDer) {
    std::vector<Bus> buses(2);
    buses[0].id = 1;
    buses[0].is_reference = true;
    buses[1].id = 2;
    EXPECT_THROW(solve_droop(NetworkCase(buses, {{1, 2, 0.01, 0.02, false, true}}), {}), Error);
}

TEST(SolveDroop, NotConvergedCarriesHistory) {
    const auto c = builtin_case33(Topology::Radial);
    SolverOptions o;
    o.max_iter = 2;
    try {
        solve_droop(c.network, c.ders, o);
        FAIL() << "expected NotConverged";
    } catch (const NotConverged& e) {
        EXPECT_EQ(e.max_iter(), 2);
        EXPECT_EQ(e.residual_history().size(), 2u);
    }
    o.throw_on_nonconvergence = false;
    const auto sol = solve_droop(c.network, c.ders, o);
    EXPECT_FALSE(sol.converged);
    EXPECT_EQ(sol.residual_history.size(), 2u);
}

TEST(Solve, DpEqualsSolveDroop) {
    const auto c = builtin_case33(Topology::Meshed);
    const auto a = solve(c.network, c.ders, {ControlMode::DP, 1, 1e-3});
    const auto b = solve_droop(c.network, c.ders);
    EXPECT_EQ(a.state.v, b.state.v);
    EXPECT_EQ(a.state.theta, b.state.theta);
    EXPECT_EQ(a.state.f, b.state.f);
    EXPECT_EQ(a.iterations, b.iterations);
}

TEST(Solve, VrRecoversWithinBudget) {
    for (auto topology : {Topology::Radial, Topology::Meshed}) {
        const auto c = builtin_case33(topology);
        const auto sol = solve(c.network, c.ders, {ControlMode::VR, std::nullopt, 1e-3});
        EXPECT_TRUE(sol.converged);
        EXPECT_LE(sol.iterations, 40);
        for (const auto& d : c.ders) EXPECT_NEAR(sol.state.v[c.network.index_of(d.bus)], 1.0, 1e-4);
    }
}

TEST(Solve, NoLeader) {
    const auto c = builtin_case33(Topology::Radial);
    EXPECT_THROW(solve(c.network, c.ders, {ControlMode::RPS, std::nullopt, 1e-3}), NoLeader);
    EXPECT_THROW(solve(c.network, c.ders, {ControlMode::ST, std::nullopt, 1e-3}), NoLeader);
}

TEST(Solve, ConvergedResidualEveryModeAndTopology) {
    for (auto topology : {Topology::Radial, Topology::Meshed}) {
        const auto c = builtin_case33(topology);
        for (auto mode : all_modes) {
            const auto sol = solve(c.network, c.ders, {mode, 1, 1e-3});
            ASSERT_TRUE(sol.converged);
            EXPECT_LT(sol.final_residual, 1e-5);
            double pg = 0.0;
            double pl = 0.0;
            for (const auto& d : sol.der_injections) pg += d.p;
            for (const auto& b : c.network.buses()) pl += b.p_load;
            EXPECT_LT(std::abs(pg - pl - sol.losses), 1e-5);
        }
    }
}

TEST(Solve, ReferenceInvariance) {
    const auto c = builtin_case33(Topology::Meshed);
    const auto opts = testing_support::tight_options();
    for (auto mode : all_modes) {
        const auto a = solve(c.network, c.ders, {mode, 1, 1e-3}, opts);
        const auto b = solve(c.network.with_reference(25), c.ders, {mode, 1, 1e-3}, opts);
        const double shift = b.state.theta[0] - a.state.theta[0];
        for (std::size_t i = 0; i < c.network.size(); ++i) {
            EXPECT_NEAR(a.state.v[i], b.state.v[i], 1e-8);
            EXPECT_NEAR(a.state.theta[i] + shift, b.state.theta[i], 1e-8);
        }
        EXPECT_NEAR(a.state.f, b.state.f, 1e-8);
        for (std::size_t k = 0; k < c.ders.size(); ++k) {
            EXPECT_NEAR(a.der_injections[k].p, b.der_injections[k].p, 1e-8);
            EXPECT_NEAR(a.der_injections[k].q, b.der_injections[k].q, 1e-8);
        }
        for (std::size_t k = 0; k < a.branch_flows.size(); ++k) {
            EXPECT_NEAR(std::abs(a.branch_flows[k].s_send - b.branch_flows[k].s_send), 0.0, 1e-8);
        }
    }
}

TEST(Solve, MeshedWithOpenSwitchesEqualsRadial) {
    const auto radial = builtin_case33(Topology::Radial);
    const auto meshed = builtin_case33(Topology::Meshed);
    const auto opened = set_all_switches(meshed.network, false);
    for (auto mode : all_modes) {
        const auto a = solve(radial.network, radial.ders, {mode, 1, 1e-3});
        const auto b = solve(opened, meshed.ders, {mode, 1, 1e-3});
        EXPECT_EQ(a.state.v, b.state.v);
        EXPECT_EQ(a.state.theta, b.state.theta);
        EXPECT_EQ(a.residual_history, b.residual_history);
    }
}

TEST(Solve, DeterministicReruns) {
    const auto c = builtin_case33(Topology::Meshed);
    for (auto mode : all_modes) {
        const auto a = solve(c.network, c.ders, {mode, 1, 1e-3});
        const auto b = solve(c.network, c.ders, {mode, 1, 1e-3});
        EXPECT_EQ(a.residual_history, b.residual_history);
        EXPECT_EQ(a.state.v, b.state.v);
    }
}

TEST(Solve, PvBusHoldsMagnitudeAndSchedule) {
    auto sc = random_six_bus(4);
    std::vector<Bus> buses = sc.net.buses();
    buses[3].kind = BusKind::PV;
    buses[3].v_set = 1.01;
    buses[3].p_gen = 0.2;
    const NetworkCase net(buses, sc.net.branches());
    const PowerFlowModel model(net, sc.ders);
    EXPECT_EQ(model.layout.size(), 2u * 6u - 1u);
    EXPECT_EQ(model.layout.v_col(3), StateLayout::none);

    const auto sol = solve(net, sc.ders, {ControlMode::DP, 1, 1e-3});
    ASSERT_TRUE(sol.converged);
    EXPECT_EQ(sol.state.v[3], 1.01);
    const auto inj = network_injections(build_admittance(net), sol.state.theta, sol.state.v);
    EXPECT_NEAR(inj.p[3], 0.2 - buses[3].p_load, 1e-5);

    // The FD check covers the PV layout too.
    std::mt19937 rng(9);
    const auto x = testing_support::random_state(model, rng);
    const auto jac = assemble_jacobian(model, ControlState{}, x, false);
    const auto fd = oracle::fd_jacobian(model, ControlState{}, x);
    const auto mask = oracle::analytic_mask(model);
    for (Eigen::Index r = 0; r < jac.rows(); ++r) {
        for (Eigen::Index c = 0; c < jac.cols(); ++c) {
            if (mask(r, c)) {
                EXPECT_NEAR(jac(r, c), fd(r, c), 1e-6 * std::max(1.0, std::abs(fd(r, c))));
            }
        }
    }
}

TEST(Solve, ZdRobustness) {
    const auto c = builtin_case33(Topology::Radial);
    const auto reference = solve(c.network, c.ders, {ControlMode::VR, std::nullopt, 1e-3},
                                 testing_support::tight_options());
    for (double z : {1e-4, 1e-3, 1e-2, 1e-1}) {
        const auto sol = solve(c.network, c.ders, {ControlMode::VR, std::nullopt, z});
        EXPECT_TRUE(sol.converged) << z;
        const auto tight = solve(c.network, c.ders, {ControlMode::VR, std::nullopt, z},
                                 testing_support::tight_options());
        for (std::size_t i = 0; i < c.network.size(); ++i) EXPECT_NEAR(tight.state.v[i], reference.state.v[i], 1e-6);
    }
}

TEST(Solve, LiteralRhoRefreshDoesNotSettleOnCase33) {
    const auto c = builtin_case33(Topology::Radial);
    SolverOptions o;
    o.rho_relaxation = 1.0;
    o.throw_on_nonconvergence = false;
    bool settled = false;
    try {
        settled = solve(c.network, c.ders, {ControlMode::RPS, 1, 1e-3}, o).converged;
    } catch (const SingularJacobian&) {
    }
    EXPECT_FALSE(settled);
}
