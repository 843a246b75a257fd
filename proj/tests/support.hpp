#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "empf/case33.hpp"
#include "empf/controls.hpp"
#include "empf/netmodel.hpp"
#include "empf/solver.hpp"

namespace testing_support {

using namespace empf;

struct SmallCase {
    NetworkCase net;
    std::vector<DroopParams> ders;
};

// 6 buses, DERs at 1 (reference), 3 and 5, one loop through 2-6.
inline SmallCase random_six_bus(unsigned seed) {
    std::mt19937 rng(seed);
    std::uniform_real_distribution<double> r(0.005, 0.05);
    std::uniform_real_distribution<double> x(0.01, 0.1);
    std::uniform_real_distribution<double> pl(0.05, 0.4);
    std::uniform_real_distribution<double> ql(0.02, 0.2);
    std::uniform_real_distribution<double> droop(0.02, 0.1);

    std::vector<Bus> buses;
    for (int id = 1; id <= 6; ++id) {
        Bus b;
        b.id = id;
        b.kind = (id % 2 == 1) ? BusKind::DER : BusKind::PQ;
        b.p_load = pl(rng);
        b.q_load = ql(rng);
        b.is_reference = id == 1;
        buses.push_back(b);
    }
    std::vector<Branch> branches;
    for (auto [a, b] : std::vector<std::pair<int, int>>{{1, 2}, {2, 3}, {3, 4}, {4, 5}, {5, 6}, {2, 6}}) {
        branches.push_back({a, b, r(rng), x(rng), false, true});
    }
    std::vector<DroopParams> ders;
    for (int id : {1, 3, 5}) {
        DroopParams d;
        d.bus = id;
        d.m = droop(rng) * 0.1;
        d.n = droop(rng);
        d.v0 = 1.02;
        d.p_set = 0.1;
        d.q_set = 0.05;
        d.q_star = 0.5 + 0.5 * droop(rng) * 10;
        ders.push_back(d);
    }
    return {NetworkCase(std::move(buses), std::move(branches)), std::move(ders)};
}

inline StateVector random_state(const PowerFlowModel& model, std::mt19937& rng) {
    std::uniform_real_distribution<double> th(-0.1, 0.1);
    std::uniform_real_distribution<double> v(0.92, 1.05);
    std::uniform_real_distribution<double> f(0.99, 1.01);
    StateVector x = model.flat_start();
    for (std::size_t i = 0; i < model.net.size(); ++i) {
        if (model.layout.theta_col(i) != StateLayout::none) x.theta[i] = th(rng);
        if (model.layout.v_col(i) != StateLayout::none) x.v[i] = v(rng);
    }
    x.f = f(rng);
    return x;
}

inline ControlState random_control(const PowerFlowModel& model, ControlMode mode, std::mt19937& rng,
                                   double z_d = 1e-2) {
    std::uniform_real_distribution<double> u(0.9, 1.1);
    ControlState s;
    s.mode = mode;
    s.leader = model.ders.front().bus;
    s.rho = u(rng) - 0.3;
    for (std::size_t k = 0; k < model.ders.size(); ++k) {
        s.v_d.push_back(u(rng));
        s.z_d.push_back(z_d);
        s.q0.push_back(u(rng) - 0.8);
    }
    return s;
}

// Droop DER at bus 1 feeding a PQ load at bus 2.
inline SmallCase two_bus(const DroopParams& der, double p_load, double q_load, double r, double x) {
    std::vector<Bus> buses(2);
    buses[0].id = 1;
    buses[0].kind = BusKind::DER;
    buses[0].is_reference = true;
    buses[1].id = 2;
    buses[1].p_load = p_load;
    buses[1].q_load = q_load;
    DroopParams d = der;
    d.bus = 1;
    return {NetworkCase(std::move(buses), {{1, 2, r, x, false, true}}), {d}};
}

inline std::filesystem::path temp_path(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / "empf-tests";
    std::filesystem::create_directories(dir);
    return dir / name;
}

// Solver options pinning the fixed point far below the default tolerances.
inline SolverOptions tight_options() {
    SolverOptions o;
    o.tol_vd = 1e-12;
    o.tol_vtheta = 1e-11;
    o.tol_f_rho = 1e-12;
    return o;
}

}  // namespace testing_support
