#pragma once

// Case and result files.
//
// Both are JSON documents carrying `format_version: 1`. Case files hold
// everything already on the system base: bus loads and branch impedances in
// p.u. of base_mva / base_kv, droop `m` and `f0` in p.u. of f_nominal.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "empf/case33.hpp"
#include "empf/controls.hpp"
#include "empf/errors.hpp"
#include "empf/netmodel.hpp"
#include "empf/solver.hpp"

namespace empf {

inline constexpr int format_version = 1;

using json = nlohmann::json;

namespace detail {

template <typename T>
T require(const json& obj, const char* key, const std::string& where) {
    if (!obj.is_object() || !obj.contains(key)) {
        throw ParseError("missing key '" + std::string(key) + "' in " + where, -1);
    }
    try {
        return obj.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ParseError("bad value for '" + std::string(key) + "' in " + where + ": " + e.what(), -1);
    }
}

template <typename T>
T optional_or(const json& obj, const char* key, T fallback, const std::string& where) {
    if (!obj.contains(key) || obj.at(key).is_null()) return fallback;
    return require<T>(obj, key, where);
}

inline BusKind parse_kind(const std::string& s, const std::string& where) {
    if (s == "PQ" || s == "pq") return BusKind::PQ;
    if (s == "PV" || s == "pv") return BusKind::PV;
    if (s == "DER" || s == "der") return BusKind::DER;
    throw ParseError("unknown bus kind '" + s + "' in " + where, -1);
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << text;
    if (!out) throw IoError("failed writing " + path.string());
}

inline std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline json parse_document(const std::string& text) {
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        throw ParseError(e.what(), static_cast<long>(e.byte));
    }
}

inline void check_version(const json& doc) {
    const int version = require<int>(doc, "format_version", "document");
    if (version != format_version) {
        throw ValidationError("unsupported format_version", std::to_string(version));
    }
}

}  // namespace detail

/// Checks every case-file rule; throws ValidationError naming the first violation.
inline void validate_case(const CaseBundle& c) {
    const auto& net = c.network;
    std::set<int> ids;
    int references = 0;
    for (const auto& b : net.buses()) {
        if (!ids.insert(b.id).second) throw ValidationError("duplicate bus id", std::to_string(b.id));
        if (!(b.v_rated > 0.0)) throw ValidationError("non-positive rated voltage", "bus " + std::to_string(b.id));
        if (!std::isfinite(b.p_load) || !std::isfinite(b.q_load)) {
            throw ValidationError("non-finite load", "bus " + std::to_string(b.id));
        }
        if (b.kind == BusKind::PV && !(b.v_set > 0.0)) {
            throw ValidationError("non-positive PV setpoint", "bus " + std::to_string(b.id));
        }
        if (b.is_reference) {
            ++references;
            if (b.kind != BusKind::DER) {
                throw ValidationError("reference bus is not a DER bus", "bus " + std::to_string(b.id));
            }
        }
    }
    if (references == 0) throw ValidationError("no reference bus", "exactly one DER bus must be the reference");
    if (references > 1) throw ValidationError("two reference buses", std::to_string(references) + " marked");

    for (const auto& br : net.branches()) {
        const auto name = std::to_string(br.from_bus) + "-" + std::to_string(br.to_bus);
        if (!ids.contains(br.from_bus) || !ids.contains(br.to_bus)) {
            throw ValidationError("dangling branch endpoint", "branch " + name);
        }
        if (br.from_bus == br.to_bus) throw ValidationError("self-loop branch", "branch " + name);
        if (br.r == 0.0 && br.x == 0.0) throw ValidationError("zero-impedance branch", "branch " + name);
        if (!br.is_switch && !br.closed) throw ValidationError("open non-switch branch", "branch " + name);
    }

    std::set<int> der_buses;
    for (const auto& d : c.ders) {
        const auto where = "DER at bus " + std::to_string(d.bus);
        if (!ids.contains(d.bus)) throw ValidationError("DER on unknown bus", where);
        if (net.bus(net.index_of(d.bus)).kind != BusKind::DER) {
            throw ValidationError("DER record on non-DER bus", where);
        }
        if (!der_buses.insert(d.bus).second) throw ValidationError("duplicate DER record", where);
        if (!(d.m > 0.0) || !(d.n > 0.0)) throw ValidationError("non-positive droop coefficient", where);
        if (!(d.q_star > 0.0)) throw ValidationError("non-positive rated var output", where);
    }
    for (const auto& b : net.buses()) {
        if (b.kind == BusKind::DER && !der_buses.contains(b.id)) {
            throw ValidationError("DER bus without droop parameters", "bus " + std::to_string(b.id));
        }
    }
    if (c.ders.empty()) throw ValidationError("no DER bus", "case needs at least one DER");

    if (needs_leader(c.control.mode) && !c.control.leader) {
        throw ValidationError("no leader designated", std::string("mode ") + to_string(c.control.mode));
    }
    if (c.control.leader && !der_buses.contains(*c.control.leader)) {
        throw ValidationError("leader is not a DER bus", "bus " + std::to_string(*c.control.leader));
    }
    if (!(c.control.z_d > 0.0)) throw ValidationError("non-positive z_d", std::to_string(c.control.z_d));

    try {
        check_connected(net, *net.reference_index());
    } catch (const DisconnectedNetwork& e) {
        throw ValidationError("disconnected network", e.what());
    }
}

inline json case_to_json(const CaseBundle& c) {
    const auto& net = c.network;
    json doc;
    doc["format_version"] = format_version;
    doc["name"] = c.name;
    doc["base_mva"] = net.bases().base_mva;
    doc["base_kv"] = net.bases().base_kv;
    doc["f_nominal"] = net.bases().f_nominal;
    doc["buses"] = json::array();
    for (const auto& b : net.buses()) {
        json jb{{"id", b.id},         {"kind", to_string(b.kind)}, {"p_load", b.p_load},
                {"q_load", b.q_load}, {"v_rated", b.v_rated},      {"is_reference", b.is_reference}};
        if (b.kind == BusKind::PV) {
            jb["v_set"] = b.v_set;
            jb["p_gen"] = b.p_gen;
        }
        doc["buses"].push_back(jb);
    }
    doc["branches"] = json::array();
    for (const auto& br : net.branches()) {
        doc["branches"].push_back({{"from", br.from_bus},
                                   {"to", br.to_bus},
                                   {"r_pu", br.r},
                                   {"x_pu", br.x},
                                   {"is_switch", br.is_switch},
                                   {"closed", br.closed}});
    }
    doc["ders"] = json::array();
    for (const auto& d : c.ders) {
        json jd{{"bus", d.bus}, {"m", d.m},         {"n", d.n},         {"f0", d.f0},
                {"v0", d.v0},   {"p_set", d.p_set}, {"q_set", d.q_set}, {"q_star", d.q_star}};
        if (d.p_max) jd["p_max"] = *d.p_max;
        if (d.q_max) jd["q_max"] = *d.q_max;
        doc["ders"].push_back(jd);
    }
    json ctl{{"mode", to_string(c.control.mode)}, {"z_d", c.control.z_d}};
    ctl["leader"] = c.control.leader ? json(*c.control.leader) : json(nullptr);
    doc["control"] = ctl;
    return doc;
}

/// Parses and validates a case document.
inline CaseBundle case_from_json(const json& doc) {
    detail::check_version(doc);
    using detail::optional_or;
    using detail::require;

    CaseBundle c;
    c.name = require<std::string>(doc, "name", "case");
    Bases bases{require<double>(doc, "base_mva", "case"), require<double>(doc, "base_kv", "case"),
                require<double>(doc, "f_nominal", "case")};

    std::vector<Bus> buses;
    const auto& jbuses = require<json>(doc, "buses", "case");
    for (std::size_t i = 0; i < jbuses.size(); ++i) {
        const auto& jb = jbuses[i];
        const auto where = "buses[" + std::to_string(i) + "]";
        Bus b;
        b.id = require<int>(jb, "id", where);
        b.kind = detail::parse_kind(require<std::string>(jb, "kind", where), where);
        b.p_load = optional_or<double>(jb, "p_load", 0.0, where);
        b.q_load = optional_or<double>(jb, "q_load", 0.0, where);
        b.v_rated = optional_or<double>(jb, "v_rated", 1.0, where);
        b.v_set = optional_or<double>(jb, "v_set", 1.0, where);
        b.p_gen = optional_or<double>(jb, "p_gen", 0.0, where);
        b.is_reference = optional_or<bool>(jb, "is_reference", false, where);
        buses.push_back(b);
    }

    std::vector<Branch> branches;
    const auto& jbranches = require<json>(doc, "branches", "case");
    for (std::size_t i = 0; i < jbranches.size(); ++i) {
        const auto& jb = jbranches[i];
        const auto where = "branches[" + std::to_string(i) + "]";
        Branch br;
        br.from_bus = require<int>(jb, "from", where);
        br.to_bus = require<int>(jb, "to", where);
        br.r = require<double>(jb, "r_pu", where);
        br.x = require<double>(jb, "x_pu", where);
        br.is_switch = optional_or<bool>(jb, "is_switch", false, where);
        br.closed = optional_or<bool>(jb, "closed", true, where);
        branches.push_back(br);
    }

    const auto& jders = require<json>(doc, "ders", "case");
    for (std::size_t i = 0; i < jders.size(); ++i) {
        const auto& jd = jders[i];
        const auto where = "ders[" + std::to_string(i) + "]";
        DroopParams d;
        d.bus = require<int>(jd, "bus", where);
        d.m = require<double>(jd, "m", where);
        d.n = require<double>(jd, "n", where);
        d.f0 = optional_or<double>(jd, "f0", 1.0, where);
        d.v0 = optional_or<double>(jd, "v0", 1.0, where);
        d.p_set = optional_or<double>(jd, "p_set", 0.0, where);
        d.q_set = optional_or<double>(jd, "q_set", 0.0, where);
        d.q_star = optional_or<double>(jd, "q_star", 1.0, where);
        if (jd.contains("p_max") && !jd["p_max"].is_null()) d.p_max = require<double>(jd, "p_max", where);
        if (jd.contains("q_max") && !jd["q_max"].is_null()) d.q_max = require<double>(jd, "q_max", where);
        c.ders.push_back(d);
    }

    if (doc.contains("control")) {
        const auto& jc = doc["control"];
        const auto mode_name = optional_or<std::string>(jc, "mode", "dp", "control");
        auto mode = parse_mode(mode_name);
        if (!mode) throw ParseError("unknown control mode '" + mode_name + "'", -1);
        c.control.mode = *mode;
        if (jc.contains("leader") && !jc["leader"].is_null()) c.control.leader = require<int>(jc, "leader", "control");
        c.control.z_d = optional_or<double>(jc, "z_d", 1e-3, "control");
        auto& o = c.options;
        o.tol_vtheta = optional_or<double>(jc, "tol_vtheta", o.tol_vtheta, "control");
        o.tol_f_rho = optional_or<double>(jc, "tol_f_rho", o.tol_f_rho, "control");
        o.tol_vd = optional_or<double>(jc, "tol_vd", o.tol_vd, "control");
        o.max_iter = optional_or<int>(jc, "max_iter", o.max_iter, "control");
        o.vd_gain = optional_or<double>(jc, "vd_gain", o.vd_gain, "control");
        if (!(o.tol_vtheta > 0.0 && o.tol_f_rho > 0.0 && o.tol_vd > 0.0)) {
            throw ValidationError("non-positive tolerance", "control");
        }
        if (o.max_iter < 1) throw ValidationError("max_iter below 1", "control");
    }

    std::set<int> seen;
    for (const auto& b : buses) {
        if (!seen.insert(b.id).second) throw ValidationError("duplicate bus id", std::to_string(b.id));
    }
    for (const auto& br : branches) {
        if (!seen.contains(br.from_bus) || !seen.contains(br.to_bus)) {
            throw ValidationError("dangling branch endpoint",
                                  "branch " + std::to_string(br.from_bus) + "-" + std::to_string(br.to_bus));
        }
    }
    c.network = NetworkCase(std::move(buses), std::move(branches), bases);
    validate_case(c);
    return c;
}

inline CaseBundle load_case_text(const std::string& text) { return case_from_json(detail::parse_document(text)); }

inline CaseBundle load_case(const std::filesystem::path& path) { return load_case_text(detail::read_text(path)); }

inline void save_case(const CaseBundle& c, const std::filesystem::path& path) {
    detail::write_text(path, case_to_json(c).dump(2) + "\n");
}

inline json solution_to_json(const PowerFlowSolution& s, const std::string& case_name) {
    json doc;
    doc["format_version"] = format_version;
    doc["case"] = case_name;
    doc["mode"] = to_string(s.mode);
    doc["converged"] = s.converged;
    doc["iterations"] = s.iterations;
    doc["bootstrap_iterations"] = s.bootstrap_iterations;
    doc["f_pu"] = s.state.f;
    doc["f_hz"] = s.f_hz;
    doc["losses"] = s.losses;
    doc["final_residual"] = s.final_residual;
    doc["residual_history"] = s.residual_history;
    doc["buses"] = json::array();
    for (std::size_t i = 0; i < s.bus_ids.size(); ++i) {
        doc["buses"].push_back({{"id", s.bus_ids[i]}, {"v", s.state.v[i]}, {"theta", s.state.theta[i]}});
    }
    doc["ders"] = json::array();
    for (const auto& d : s.der_injections) {
        doc["ders"].push_back({{"bus", d.bus},
                               {"p", d.p},
                               {"q", d.q},
                               {"p_limit_exceeded", d.p_limit_exceeded},
                               {"q_limit_exceeded", d.q_limit_exceeded}});
    }
    doc["branches"] = json::array();
    for (const auto& f : s.branch_flows) {
        doc["branches"].push_back({{"from", f.from_bus},
                                   {"to", f.to_bus},
                                   {"p_send", f.s_send.real()},
                                   {"q_send", f.s_send.imag()},
                                   {"p_recv", f.s_recv.real()},
                                   {"q_recv", f.s_recv.imag()}});
    }
    json ctl{{"mode", to_string(s.control.mode)},
             {"rho", s.control.rho},
             {"v_d", s.control.v_d},
             {"z_d", s.control.z_d},
             {"q0", s.control.q0}};
    ctl["leader"] = s.control.leader ? json(*s.control.leader) : json(nullptr);
    doc["control"] = ctl;
    return doc;
}

struct ResultFile {
    std::string case_name;
    PowerFlowSolution solution;
};

inline ResultFile solution_from_json(const json& doc) {
    detail::check_version(doc);
    using detail::require;
    ResultFile r;
    auto& s = r.solution;
    r.case_name = require<std::string>(doc, "case", "result");
    const auto mode = parse_mode(require<std::string>(doc, "mode", "result"));
    if (!mode) throw ParseError("unknown mode in result file", -1);
    s.mode = *mode;
    s.converged = require<bool>(doc, "converged", "result");
    s.iterations = require<int>(doc, "iterations", "result");
    s.bootstrap_iterations = require<int>(doc, "bootstrap_iterations", "result");
    s.state.f = require<double>(doc, "f_pu", "result");
    s.f_hz = require<double>(doc, "f_hz", "result");
    s.losses = require<double>(doc, "losses", "result");
    s.final_residual = require<double>(doc, "final_residual", "result");
    s.residual_history = require<std::vector<double>>(doc, "residual_history", "result");
    for (const auto& jb : require<json>(doc, "buses", "result")) {
        s.bus_ids.push_back(require<int>(jb, "id", "result bus"));
        s.state.v.push_back(require<double>(jb, "v", "result bus"));
        s.state.theta.push_back(require<double>(jb, "theta", "result bus"));
    }
    for (const auto& jd : require<json>(doc, "ders", "result")) {
        s.der_injections.push_back({require<int>(jd, "bus", "result DER"), require<double>(jd, "p", "result DER"),
                                    require<double>(jd, "q", "result DER"),
                                    require<bool>(jd, "p_limit_exceeded", "result DER"),
                                    require<bool>(jd, "q_limit_exceeded", "result DER")});
    }
    for (const auto& jf : require<json>(doc, "branches", "result")) {
        s.branch_flows.push_back(
            {require<int>(jf, "from", "result branch"), require<int>(jf, "to", "result branch"),
             Complex(require<double>(jf, "p_send", "result branch"), require<double>(jf, "q_send", "result branch")),
             Complex(require<double>(jf, "p_recv", "result branch"), require<double>(jf, "q_recv", "result branch"))});
    }
    const auto& jc = require<json>(doc, "control", "result");
    s.control.mode = *parse_mode(require<std::string>(jc, "mode", "result control"));
    s.control.rho = require<double>(jc, "rho", "result control");
    s.control.v_d = require<std::vector<double>>(jc, "v_d", "result control");
    s.control.z_d = require<std::vector<double>>(jc, "z_d", "result control");
    s.control.q0 = require<std::vector<double>>(jc, "q0", "result control");
    if (!jc["leader"].is_null()) s.control.leader = require<int>(jc, "leader", "result control");
    return r;
}

inline ResultFile load_results(const std::filesystem::path& path) {
    return solution_from_json(detail::parse_document(detail::read_text(path)));
}

enum class ResultFormat { Json, Csv };

/// Companion path of the branch table when writing CSV: "<stem>_branches<ext>".
inline std::filesystem::path branch_table_path(const std::filesystem::path& path) {
    auto out = path;
    out.replace_filename(path.stem().string() + "_branches" + path.extension().string());
    return out;
}

inline std::string bus_table_csv(const PowerFlowSolution& s) {
    std::ostringstream out;
    out << std::setprecision(17);
    out << "bus_id,v_pu,theta_rad,p_gen,q_gen\n";
    for (std::size_t i = 0; i < s.bus_ids.size(); ++i) {
        double p = 0.0;
        double q = 0.0;
        for (const auto& d : s.der_injections) {
            if (d.bus == s.bus_ids[i]) {
                p = d.p;
                q = d.q;
            }
        }
        out << s.bus_ids[i] << ',' << s.state.v[i] << ',' << s.state.theta[i] << ',' << p << ',' << q << '\n';
    }
    return out.str();
}

inline std::string branch_table_csv(const PowerFlowSolution& s) {
    std::ostringstream out;
    out << std::setprecision(17);
    out << "from,to,p_send,q_send,p_recv,q_recv,p_loss\n";
    for (const auto& f : s.branch_flows) {
        out << f.from_bus << ',' << f.to_bus << ',' << f.s_send.real() << ',' << f.s_send.imag() << ','
            << f.s_recv.real() << ',' << f.s_recv.imag() << ',' << f.loss().real() << '\n';
    }
    return out.str();
}

/// JSON writes the full result file; CSV writes the bus table to `path` and
/// the branch table next to it (see branch_table_path).
inline void save_results(const PowerFlowSolution& s, const std::string& case_name, const std::filesystem::path& path,
                         ResultFormat format) {
    if (format == ResultFormat::Json) {
        detail::write_text(path, solution_to_json(s, case_name).dump(2) + "\n");
        return;
    }
    detail::write_text(path, bus_table_csv(s));
    detail::write_text(branch_table_path(path), branch_table_csv(s));
}

}  // namespace empf
