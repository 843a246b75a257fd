#pragma once

// Network description, admittance construction and power injections.

#include <cmath>
#include <complex>
#include <cstddef>
#include <map>
#include <optional>
#include <queue>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "empf/errors.hpp"

namespace empf {

using Complex = std::complex<double>;

enum class BusKind { PQ, PV, DER };

inline const char* to_string(BusKind kind) {
    switch (kind) {
        case BusKind::PQ: return "PQ";
        case BusKind::PV: return "PV";
        case BusKind::DER: return "DER";
    }
    return "?";
}

struct Bus {
    int id = 0;  // external 1-based id as written in the case file
    BusKind kind = BusKind::PQ;
    double p_load = 0.0;
    double q_load = 0.0;
    double v_rated = 1.0;
    double v_set = 1.0;  // PV buses only
    double p_gen = 0.0;  // PV buses only: scheduled real generation
    bool is_reference = false;

    bool operator==(const Bus&) const = default;
};

struct Branch {
    int from_bus = 0;
    int to_bus = 0;
    double r = 0.0;
    double x = 0.0;
    bool is_switch = false;
    bool closed = true;

    bool in_service() const { return !is_switch || closed; }
    Complex series_admittance() const { return 1.0 / Complex(r, x); }

    bool operator==(const Branch&) const = default;
};

struct Bases {
    double base_mva = 1.0;
    double base_kv = 1.0;
    double f_nominal = 60.0;  // Hz

    bool operator==(const Bases&) const = default;
};

/// Immutable network: buses in dense internal order, branches referring to external ids.
class NetworkCase {
  public:
    NetworkCase() = default;

    NetworkCase(std::vector<Bus> buses, std::vector<Branch> branches, Bases bases = {})
        : buses_(std::move(buses)), branches_(std::move(branches)), bases_(bases) {
        for (std::size_t i = 0; i < buses_.size(); ++i) {
            index_.emplace(buses_[i].id, i);
        }
    }

    std::size_t size() const { return buses_.size(); }
    const std::vector<Bus>& buses() const { return buses_; }
    const std::vector<Branch>& branches() const { return branches_; }
    const Bus& bus(std::size_t index) const { return buses_.at(index); }
    const Bases& bases() const { return bases_; }

    bool has_bus(int id) const { return index_.contains(id); }

    std::size_t index_of(int id) const {
        auto it = index_.find(id);
        if (it == index_.end()) {
            throw Error("unknown bus id " + std::to_string(id));
        }
        return it->second;
    }

    std::optional<std::size_t> reference_index() const {
        for (std::size_t i = 0; i < buses_.size(); ++i) {
            if (buses_[i].is_reference) return i;
        }
        return std::nullopt;
    }

    std::size_t closed_branch_count() const {
        std::size_t count = 0;
        for (const auto& br : branches_) count += br.in_service() ? 1 : 0;
        return count;
    }

    /// Returns a copy with the reference flag moved to the DER bus `id`.
    NetworkCase with_reference(int id) const {
        auto buses = buses_;
        for (auto& b : buses) b.is_reference = (b.id == id);
        if (buses.at(index_of(id)).kind != BusKind::DER) {
            throw Error("reference bus " + std::to_string(id) + " is not a DER bus");
        }
        return NetworkCase(std::move(buses), branches_, bases_);
    }

    /// Returns a copy with the given branch list.
    NetworkCase with_branches(std::vector<Branch> branches) const {
        return NetworkCase(buses_, std::move(branches), bases_);
    }

    bool operator==(const NetworkCase& other) const {
        return buses_ == other.buses_ && branches_ == other.branches_ && bases_ == other.bases_;
    }

  private:
    std::vector<Bus> buses_;
    std::vector<Branch> branches_;
    Bases bases_;
    std::map<int, std::size_t> index_;
};

/// Bus admittance in polar form: |Y_ij| and angle alpha_ij.
struct AdmittanceMatrix {
    std::size_t n = 0;
    Eigen::MatrixXd mag;
    Eigen::MatrixXd ang;

    Complex entry(std::size_t i, std::size_t j) const { return std::polar(mag(i, j), ang(i, j)); }

    Eigen::MatrixXcd rectangular() const {
        Eigen::MatrixXcd y(n, n);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) y(i, j) = entry(i, j);
        return y;
    }
};

/// Throws DisconnectedNetwork unless every bus is reachable from `root` over in-service branches.
inline void check_connected(const NetworkCase& net, std::size_t root) {
    const std::size_t n = net.size();
    std::vector<std::vector<std::size_t>> adj(n);
    for (const auto& br : net.branches()) {
        if (!br.in_service()) continue;
        auto a = net.index_of(br.from_bus);
        auto b = net.index_of(br.to_bus);
        adj[a].push_back(b);
        adj[b].push_back(a);
    }
    std::vector<bool> seen(n, false);
    std::queue<std::size_t> frontier;
    frontier.push(root);
    seen[root] = true;
    while (!frontier.empty()) {
        auto u = frontier.front();
        frontier.pop();
        for (auto v : adj[u]) {
            if (!seen[v]) {
                seen[v] = true;
                frontier.push(v);
            }
        }
    }
    for (std::size_t i = 0; i < n; ++i) {
        if (!seen[i]) {
            throw DisconnectedNetwork("bus " + std::to_string(net.bus(i).id) +
                                      " is not reachable from the reference bus");
        }
    }
}

/// Builds the series-impedance bus admittance of the closed branches.
inline AdmittanceMatrix build_admittance(const NetworkCase& net) {
    const std::size_t n = net.size();
    for (const auto& br : net.branches()) {
        if (br.from_bus == br.to_bus) {
            throw InvalidBranch("branch " + std::to_string(br.from_bus) + "-" + std::to_string(br.to_bus) +
                                " connects a bus to itself");
        }
        if (br.r == 0.0 && br.x == 0.0) {
            throw InvalidBranch("branch " + std::to_string(br.from_bus) + "-" + std::to_string(br.to_bus) +
                                " has zero impedance");
        }
    }
    if (n > 0) {
        check_connected(net, net.reference_index().value_or(0));
    }

    Eigen::MatrixXcd y = Eigen::MatrixXcd::Zero(n, n);
    for (const auto& br : net.branches()) {
        if (!br.in_service()) continue;
        auto a = net.index_of(br.from_bus);
        auto b = net.index_of(br.to_bus);
        Complex ys = br.series_admittance();
        y(a, a) += ys;
        y(b, b) += ys;
        y(a, b) -= ys;
        y(b, a) -= ys;
    }

    AdmittanceMatrix out{n, Eigen::MatrixXd::Zero(n, n), Eigen::MatrixXd::Zero(n, n)};
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            out.mag(i, j) = std::abs(y(i, j));
            out.ang(i, j) = out.mag(i, j) > 0.0 ? std::arg(y(i, j)) : 0.0;
        }
    }
    return out;
}

/// Returns a new case with switch `branch_index` set to `closed`.
inline NetworkCase toggle_switch(const NetworkCase& net, std::size_t branch_index, bool closed) {
    if (branch_index >= net.branches().size()) {
        throw NotASwitch("branch index " + std::to_string(branch_index) + " out of range");
    }
    auto branches = net.branches();
    auto& br = branches[branch_index];
    if (!br.is_switch) {
        throw NotASwitch("branch " + std::to_string(br.from_bus) + "-" + std::to_string(br.to_bus) +
                         " is not a switch");
    }
    br.closed = closed;
    return net.with_branches(std::move(branches));
}

/// Index of the branch joining `a` and `b` (either orientation).
inline std::optional<std::size_t> find_branch(const NetworkCase& net, int a, int b) {
    const auto& branches = net.branches();
    for (std::size_t k = 0; k < branches.size(); ++k) {
        const auto& br = branches[k];
        if ((br.from_bus == a && br.to_bus == b) || (br.from_bus == b && br.to_bus == a)) return k;
    }
    return std::nullopt;
}

/// Closes or opens every switch at once.
inline NetworkCase set_all_switches(const NetworkCase& net, bool closed) {
    auto branches = net.branches();
    for (auto& br : branches) {
        if (br.is_switch) br.closed = closed;
    }
    return net.with_branches(std::move(branches));
}

struct Injections {
    std::vector<double> p;
    std::vector<double> q;
};

/// Network-absorbed injections P_i, Q_i at the given bus angles and magnitudes.
inline Injections network_injections(const AdmittanceMatrix& y, std::span<const double> theta,
                                     std::span<const double> v) {
    if (theta.size() != y.n || v.size() != y.n) {
        throw DimensionMismatch("state has " + std::to_string(theta.size()) + " angles and " +
                                std::to_string(v.size()) + " magnitudes for " + std::to_string(y.n) +
                                " buses");
    }
    Injections inj{std::vector<double>(y.n, 0.0), std::vector<double>(y.n, 0.0)};
    for (std::size_t i = 0; i < y.n; ++i) {
        double p = 0.0;
        double q = 0.0;
        for (std::size_t j = 0; j < y.n; ++j) {
            const double m = y.mag(i, j);
            if (m == 0.0) continue;
            const double phi = theta[i] - theta[j] - y.ang(i, j);
            p += v[j] * m * std::cos(phi);
            q += v[j] * m * std::sin(phi);
        }
        inj.p[i] = v[i] * p;
        inj.q[i] = v[i] * q;
    }
    return inj;
}

struct BranchFlow {
    int from_bus = 0;
    int to_bus = 0;
    Complex s_send;  // into the branch at from_bus
    Complex s_recv;  // into the branch at to_bus
    Complex loss() const { return s_send + s_recv; }
};

/// Terminal complex powers of every in-service branch.
inline std::vector<BranchFlow> branch_flows(const NetworkCase& net, std::span<const double> theta,
                                            std::span<const double> v) {
    std::vector<BranchFlow> flows;
    for (const auto& br : net.branches()) {
        if (!br.in_service()) continue;
        auto a = net.index_of(br.from_bus);
        auto b = net.index_of(br.to_bus);
        const Complex va = std::polar(v[a], theta[a]);
        const Complex vb = std::polar(v[b], theta[b]);
        const Complex current = (va - vb) * br.series_admittance();
        flows.push_back({br.from_bus, br.to_bus, va * std::conj(current), vb * std::conj(-current)});
    }
    return flows;
}

}  // namespace empf
