#pragma once

// Bundled 33-bus islanded microgrid with five droop-controlled DERs.
//
// Line and load data are the standard 33-bus distribution feeder
// (12.66 kV, 3715 kW / 2300 kvar total load, five normally-open tie
// switches), converted here to a 500 kVA power base. DERs sit at buses 1, 6,
// 13, 25 and 33. The droop parameters are calibrated so that the droop-only
// solution shares real power as 2.50 : 0.98 : 1.70 : 0.98 : 1.30 p.u.

#include <array>
#include <string>
#include <vector>

#include "empf/controls.hpp"
#include "empf/netmodel.hpp"
#include "empf/solver.hpp"

namespace empf {

enum class Topology { Radial, Meshed };

inline const char* to_string(Topology t) { return t == Topology::Radial ? "radial" : "meshed"; }

/// A complete case: network, DER parameters and the default control selection.
struct CaseBundle {
    std::string name;
    NetworkCase network;
    std::vector<DroopParams> ders;
    ControlConfig control;
    SolverOptions options;

    bool operator==(const CaseBundle& o) const {
        return name == o.name && network == o.network && ders == o.ders && control == o.control;
    }
};

namespace case33_data {

inline constexpr double base_kva = 500.0;
inline constexpr double base_kv = 12.66;
inline constexpr double f_nominal = 60.0;

struct Line {
    int from, to;
    double r_ohm, x_ohm;
};

// Sectionalizing branches of the feeder (ohms).
inline constexpr std::array<Line, 32> lines{{
    {1, 2, 0.0922, 0.0470},  {2, 3, 0.4930, 0.2511},  {3, 4, 0.3660, 0.1864},  {4, 5, 0.3811, 0.1941},
    {5, 6, 0.8190, 0.7070},  {6, 7, 0.1872, 0.6188},  {7, 8, 0.7114, 0.2351},  {8, 9, 1.0300, 0.7400},
    {9, 10, 1.0440, 0.7400}, {10, 11, 0.1966, 0.0650}, {11, 12, 0.3744, 0.1238}, {12, 13, 1.4680, 1.1550},
    {13, 14, 0.5416, 0.7129}, {14, 15, 0.5910, 0.5260}, {15, 16, 0.7463, 0.5450}, {16, 17, 1.2890, 1.7210},
    {17, 18, 0.7320, 0.5740}, {2, 19, 0.1640, 0.1565},  {19, 20, 1.5042, 1.3554}, {20, 21, 0.4095, 0.4784},
    {21, 22, 0.7089, 0.9373}, {3, 23, 0.4512, 0.3083},  {23, 24, 0.8980, 0.7091}, {24, 25, 0.8960, 0.7011},
    {6, 26, 0.2030, 0.1034},  {26, 27, 0.2842, 0.1447}, {27, 28, 1.0590, 0.9337}, {28, 29, 0.8042, 0.7006},
    {29, 30, 0.5075, 0.2585}, {30, 31, 0.9744, 0.9630}, {31, 32, 0.3105, 0.3619}, {32, 33, 0.3410, 0.5302},
}};

// Normally-open tie switches (ohms).
inline constexpr std::array<Line, 5> ties{{
    {8, 21, 2.0, 2.0}, {9, 15, 2.0, 2.0}, {12, 22, 2.0, 2.0}, {18, 33, 0.5, 0.5}, {25, 29, 0.5, 0.5},
}};

// Bus loads in kW / kvar, indexed by bus id - 1.
inline constexpr std::array<double, 33> p_kw{0,  100, 90, 120, 60, 60,  200, 200, 60, 60,  45,
                                             60, 60,  120, 60, 60, 60,  90,  90,  90, 90,  90,
                                             90, 420, 420, 60, 60, 60,  120, 200, 150, 210, 60};
inline constexpr std::array<double, 33> q_kvar{0,  60, 40, 80, 30, 20, 100, 100, 20, 20, 30,
                                               35, 35, 80, 10, 20, 20, 40,  40,  40, 40, 40,
                                               50, 200, 200, 25, 25, 20, 70, 600, 70, 100, 40};

inline constexpr std::array<int, 5> der_buses{1, 6, 13, 25, 33};
// Droop-only real power shares, p.u.
inline constexpr std::array<double, 5> p_share{2.50, 0.98, 1.70, 0.98, 1.30};

// Frequency deviation (p.u.) at which the DERs deliver their p_share.
inline constexpr double m_scale = 0.005;
// Q/V droop slopes and their common no-load voltage. Chosen so the radial
// droop-only var outputs are 0.97, 0.91, 0.89, 0.91, 0.95 p.u. with bus 27
// at 0.9839 p.u.
inline constexpr std::array<double, 5> n_droop{0.06041, 0.07098, 0.06121, 0.07011, 0.06858};
inline constexpr double v_no_load = 1.05;
inline constexpr double q_rated = 1.0;
inline constexpr double z_d = 1e-3;

}  // namespace case33_data

/// The bundled case; `topology` decides whether the five tie switches are closed.
inline CaseBundle builtin_case33(Topology topology = Topology::Radial) {
    using namespace case33_data;
    const double z_base = base_kv * base_kv / (base_kva / 1000.0);

    std::vector<Bus> buses;
    for (int id = 1; id <= 33; ++id) {
        Bus b;
        b.id = id;
        b.p_load = p_kw[id - 1] / base_kva;
        b.q_load = q_kvar[id - 1] / base_kva;
        buses.push_back(b);
    }
    for (int id : der_buses) buses[id - 1].kind = BusKind::DER;
    buses[0].is_reference = true;

    std::vector<Branch> branches;
    for (const auto& l : lines) branches.push_back({l.from, l.to, l.r_ohm / z_base, l.x_ohm / z_base, false, true});
    for (const auto& l : ties) {
        branches.push_back({l.from, l.to, l.r_ohm / z_base, l.x_ohm / z_base, true, topology == Topology::Meshed});
    }

    std::vector<DroopParams> ders;
    for (std::size_t k = 0; k < der_buses.size(); ++k) {
        DroopParams d;
        d.bus = der_buses[k];
        d.m = m_scale / p_share[k];
        d.n = n_droop[k];
        d.f0 = 1.0;
        d.v0 = v_no_load;
        d.p_set = 0.0;
        d.q_set = 0.0;
        d.q_star = q_rated;
        ders.push_back(d);
    }

    CaseBundle bundle;
    bundle.name = std::string("case33-") + to_string(topology);
    bundle.network = NetworkCase(std::move(buses), std::move(branches), Bases{base_kva / 1000.0, base_kv, f_nominal});
    bundle.ders = std::move(ders);
    bundle.control = ControlConfig{ControlMode::DP, 1, z_d};
    return bundle;
}

}  // namespace empf
