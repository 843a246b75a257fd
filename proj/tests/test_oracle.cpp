#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "empf/case33.hpp"
#include "empf/oracle.hpp"
#include "empf/solver.hpp"
#include "support.hpp"

using namespace empf;

namespace {

DroopParams two_bus_der() {
    DroopParams d;
    d.bus = 1;
    d.m = 0.02;
    d.n = 0.05;
    d.v0 = 1.03;
    d.p_set = 0.0;
    d.q_set = 0.0;
    return d;
}

}  // namespace

TEST(FdJacobian, LinearDroopRowsExact) {
    const auto sc = testing_support::random_six_bus(8);
    const PowerFlowModel model(sc.net, sc.ders);
    std::mt19937 rng(1);
    const auto x = testing_support::random_state(model, rng);
    const auto fd = oracle::fd_jacobian(model, ControlState{}, x);
    const auto& lay = model.layout;
    for (std::size_t i = 0; i < sc.net.size(); ++i) {
        if (sc.net.bus(i).kind != BusKind::DER || lay.p_row(i) == StateLayout::none) continue;
        const auto& d = sc.ders[model.der_of_bus[i]];
        EXPECT_NEAR(fd(lay.p_row(i), lay.f_col()), -1.0 / d.m, 1e-10 * (1.0 / d.m));
    }
    double sum = 0.0;
    for (const auto& d : sc.ders) sum += -1.0 / d.m;
    EXPECT_NEAR(fd(lay.balance_row(), lay.f_col()), sum, 1e-10 * std::abs(sum));
}

TEST(FdJacobian, StepInsensitive) {
    const auto sc = testing_support::random_six_bus(9);
    const PowerFlowModel model(sc.net, sc.ders);
    std::mt19937 rng(4);
    const auto x = testing_support::random_state(model, rng);
    const auto ctl = testing_support::random_control(model, ControlMode::VR, rng);
    const auto base = oracle::fd_jacobian(model, ctl, x, {1e-6});
    for (double h : {1e-5, 1e-7}) {
        const auto other = oracle::fd_jacobian(model, ctl, x, {h});
        for (Eigen::Index r = 0; r < base.rows(); ++r) {
            for (Eigen::Index c = 0; c < base.cols(); ++c) {
                if (std::abs(base(r, c)) < 1e-3) continue;
                EXPECT_LT(std::abs(other(r, c) - base(r, c)) / std::abs(base(r, c)), 1e-5) << h;
            }
        }
    }
    EXPECT_THROW(oracle::fd_jacobian(model, ctl, x, {0.0}), Error);
}

TEST(FdJacobian, MaskExcludesBalanceBlocks) {
    const auto sc = testing_support::random_six_bus(2);
    const PowerFlowModel model(sc.net, sc.ders);
    const auto mask = oracle::analytic_mask(model);
    const auto& lay = model.layout;
    for (Eigen::Index c = 0; c < lay.f_col(); ++c) EXPECT_FALSE(mask(lay.balance_row(), c));
    EXPECT_TRUE(mask(lay.balance_row(), lay.f_col()));
    EXPECT_EQ(mask.count(), static_cast<Eigen::Index>(lay.size() * lay.size() - (lay.size() - 1)));
    EXPECT_EQ(oracle::analytic_mask(model, true).count(), static_cast<Eigen::Index>(lay.size() * lay.size()));
}

TEST(BruteForce, ZeroLoad) {
    const auto d = two_bus_der();
    const auto s = oracle::brute_force_2bus(d, {0.0, 0.0}, {0.02, 0.06});
    EXPECT_NEAR(s.v2, d.v0, 1e-9);
    EXPECT_NEAR(s.v1, d.v0, 1e-9);
    EXPECT_NEAR(s.theta2, 0.0, 1e-12);
    EXPECT_NEAR(s.f, d.f0, 1e-12);
}

TEST(BruteForce, MatchesNewton) {
    const auto d = two_bus_der();
    for (double load : {0.1, 0.4, 0.8}) {
        const double q = 0.4 * load;
        const auto ref = oracle::brute_force_2bus(d, {load, q}, {0.02, 0.06});
        const auto sc = testing_support::two_bus(d, load, q, 0.02, 0.06);
        const auto sol = solve_droop(sc.net, sc.ders, testing_support::tight_options());
        EXPECT_NEAR(sol.state.v[0], ref.v1, 1e-8);
        EXPECT_NEAR(sol.state.v[1], ref.v2, 1e-8);
        EXPECT_NEAR(sol.state.theta[1], ref.theta2, 1e-8);
        EXPECT_NEAR(sol.state.f, ref.f, 1e-8);
    }
}

TEST(BruteForce, BeyondDeliverability) {
    const auto d = two_bus_der();
    EXPECT_THROW(oracle::brute_force_2bus(d, {6.0, 3.0}, {0.02, 0.06}), NoSolution);
    const auto sc = testing_support::two_bus(d, 6.0, 3.0, 0.02, 0.06);
    bool failed = false;
    try {
        solve_droop(sc.net, sc.ders);
    } catch (const NotConverged&) {
        failed = true;
    } catch (const SingularJacobian&) {
        failed = true;
    }
    EXPECT_TRUE(failed);
}

TEST(Audit, InjectionsAgreeWithPolarPath) {
    const auto net = builtin_case33(Topology::Meshed).network;
    const auto y = build_admittance(net);
    const auto yr = oracle::rectangular_admittance(net);
    std::mt19937 rng(5);
    std::uniform_real_distribution<double> th(-0.2, 0.2);
    std::uniform_real_distribution<double> vm(0.9, 1.1);
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<double> theta(net.size());
        std::vector<double> v(net.size());
        for (std::size_t i = 0; i < net.size(); ++i) {
            theta[i] = th(rng);
            v[i] = vm(rng);
        }
        const auto a = network_injections(y, theta, v);
        const auto b = oracle::rectangular_injections(yr, theta, v);
        for (std::size_t i = 0; i < net.size(); ++i) {
            const double scale = std::max(1.0, std::abs(b[i]));
            EXPECT_NEAR(a.p[i], b[i].real(), 1e-12 * scale);
            EXPECT_NEAR(a.q[i], b[i].imag(), 1e-12 * scale);
        }
    }
}

TEST(Audit, ConvergedDpPasses) {
    const auto c = builtin_case33(Topology::Radial);
    const auto sol = solve_droop(c.network, c.ders);
    const auto report = oracle::audit_solution(c.network, c.ders, sol);
    EXPECT_TRUE(report.passed());
    EXPECT_LT(report.max_residual, 1e-5);
}

TEST(Audit, PerturbedVoltageFailsBalance) {
    const auto c = builtin_case33(Topology::Radial);
    auto sol = solve_droop(c.network, c.ders);
    sol.state.v[17] += 0.01;
    const auto report = oracle::audit_solution(c.network, c.ders, sol);
    EXPECT_FALSE(report.passed());
    EXPECT_EQ(report.checks[0].name, "power balance");
    EXPECT_FALSE(report.checks[0].passed);
}

TEST(Audit, RpsSharingSpread) {
    const auto c = builtin_case33(Topology::Meshed);
    const auto sol = solve(c.network, c.ders, {ControlMode::RPS, 1, 1e-3});
    const auto report = oracle::audit_solution(c.network, c.ders, sol);
    EXPECT_TRUE(report.passed());
    bool seen = false;
    for (const auto& check : report.checks) {
        if (check.name == "sharing ratio") {
            seen = true;
            EXPECT_LT(check.worst, 1e-3);
        }
    }
    EXPECT_TRUE(seen);
}

TEST(Audit, VrAndStPass) {
    for (auto topology : {Topology::Radial, Topology::Meshed}) {
        const auto c = builtin_case33(topology);
        for (auto mode : {ControlMode::VR, ControlMode::ST}) {
            const auto sol = solve(c.network, c.ders, {mode, 1, 1e-3});
            const auto report = oracle::audit_solution(c.network, c.ders, sol);
            EXPECT_TRUE(report.passed()) << to_string(mode);
        }
    }
}
