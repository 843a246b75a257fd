#pragma once

// Command-line front end. `run_cli` parses argv and dispatches to the
// subcommands; each cmd_* function writes to the given streams and returns
// the process exit status.
//
// Exit codes:
//   0  success
//   1  parse, validation or usage error
//   2  non-convergence
//   3  singular Jacobian
//   4  I/O error
//   5  other failure (including a failed audit)

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <future>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "empf/case33.hpp"
#include "empf/caseio.hpp"
#include "empf/errors.hpp"
#include "empf/oracle.hpp"
#include "empf/solver.hpp"

namespace empf::cli {

enum Exit : int {
    ok = 0,
    invalid = 1,
    not_converged = 2,
    singular = 3,
    io_error = 4,
    failure = 5,
};

struct CaseSource {
    std::optional<std::filesystem::path> path;
    std::string builtin = "case33";
    std::optional<Topology> topology;
};

struct RunConfig {
    CaseSource source;
    std::optional<ControlMode> mode;
    std::optional<int> leader;
    std::optional<double> tol_vtheta;
    std::optional<double> tol_f_rho;
    std::optional<double> tol_vd;
    std::optional<int> max_iter;
    std::optional<std::filesystem::path> out;
    ResultFormat format = ResultFormat::Json;
    bool exact_loss_jacobian = false;
    bool verbose = false;
};

struct CompareConfig {
    RunConfig base;
    std::vector<ControlMode> modes{ControlMode::DP, ControlMode::RPS, ControlMode::VR, ControlMode::ST};
    std::vector<Topology> topologies{Topology::Radial, Topology::Meshed};
    int repeats = 3;
    bool timing = true;
};

struct ProfileConfig {
    RunConfig base;
    std::vector<ControlMode> modes{ControlMode::DP};
};

struct ValidateConfig {
    CaseSource source;
    std::optional<std::filesystem::path> audit;
};

/// Loads the case, then applies the topology and every override of `cfg`.
inline CaseBundle resolve_case(const CaseSource& src) {
    CaseBundle c;
    if (src.path) {
        c = load_case(*src.path);
        if (src.topology) c.network = set_all_switches(c.network, *src.topology == Topology::Meshed);
    } else {
        if (src.builtin != "case33") throw ValidationError("unknown builtin case", src.builtin);
        c = builtin_case33(src.topology.value_or(Topology::Radial));
    }
    return c;
}

inline CaseBundle resolve_run(const RunConfig& cfg) {
    auto c = resolve_case(cfg.source);
    if (cfg.mode) c.control.mode = *cfg.mode;
    if (cfg.leader) c.control.leader = *cfg.leader;
    auto& o = c.options;
    if (cfg.tol_vtheta) o.tol_vtheta = *cfg.tol_vtheta;
    if (cfg.tol_f_rho) o.tol_f_rho = *cfg.tol_f_rho;
    if (cfg.tol_vd) o.tol_vd = *cfg.tol_vd;
    if (cfg.max_iter) o.max_iter = *cfg.max_iter;
    o.exact_loss_jacobian = cfg.exact_loss_jacobian;
    if (needs_leader(c.control.mode) && !c.control.leader) {
        throw ValidationError("no leader designated", std::string("mode ") + to_string(c.control.mode));
    }
    if (c.control.leader) {
        const bool found = std::any_of(c.ders.begin(), c.ders.end(),
                                       [&](const DroopParams& d) { return d.bus == *c.control.leader; });
        if (!found) throw ValidationError("leader is not a DER bus", std::to_string(*c.control.leader));
    }
    return c;
}

inline PowerFlowSolution solve_case(const CaseBundle& c) { return solve(c.network, c.ders, c.control, c.options); }

/// Maps an in-flight exception to an exit code and prints the diagnostic.
inline int report_error(std::ostream& err) {
    try {
        throw;
    } catch (const NotConverged& e) {
        err << "error: " << e.what() << '\n';
        return not_converged;
    } catch (const SingularJacobian& e) {
        err << "error: " << e.what() << '\n';
        return singular;
    } catch (const ParseError& e) {
        err << "error: " << e.what() << '\n';
        return invalid;
    } catch (const ValidationError& e) {
        err << "error: " << e.what() << '\n';
        return invalid;
    } catch (const NoLeader& e) {
        err << "error: " << e.what() << '\n';
        return invalid;
    } catch (const IoError& e) {
        err << "error: " << e.what() << '\n';
        return io_error;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return failure;
    }
}

inline std::string fixed(double v, int digits) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(digits) << v;
    return s.str();
}

inline std::string sci(double v) {
    std::ostringstream s;
    s << std::scientific << std::setprecision(2) << v;
    return s.str();
}

inline void print_summary(std::ostream& out, const std::string& name, const PowerFlowSolution& s) {
    out << "case       " << name << '\n'
        << "mode       " << to_string(s.mode) << '\n'
        << "converged  " << (s.converged ? "yes" : "no") << '\n'
        << "iterations " << s.iterations << " (bootstrap " << s.bootstrap_iterations << ")\n"
        << "frequency  " << fixed(s.f_hz, 6) << " Hz\n"
        << "losses     " << fixed(s.losses, 6) << " p.u.\n"
        << "residual   " << sci(s.final_residual) << '\n';
    out << "  bus        P        Q        V\n";
    for (const auto& d : s.der_injections) {
        const auto it = std::find(s.bus_ids.begin(), s.bus_ids.end(), d.bus);
        const double v = s.state.v[static_cast<std::size_t>(it - s.bus_ids.begin())];
        out << std::setw(5) << d.bus << ' ' << std::setw(8) << fixed(d.p, 4) << ' ' << std::setw(8) << fixed(d.q, 4)
            << ' ' << std::setw(8) << fixed(v, 5);
        if (d.p_limit_exceeded || d.q_limit_exceeded) out << "  limit exceeded";
        out << '\n';
    }
}

inline int cmd_run(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
    try {
        auto c = resolve_run(cfg);
        c.options.throw_on_nonconvergence = false;
        const auto sol = solve_case(c);
        print_summary(out, c.name, sol);
        if (cfg.verbose) {
            for (std::size_t k = 0; k < sol.residual_history.size(); ++k) {
                out << "  iter " << k + 1 << "  max mismatch " << sci(sol.residual_history[k]) << '\n';
            }
        }
        if (cfg.out) save_results(sol, c.name, *cfg.out, cfg.format);
        if (!sol.converged) {
            err << "error: " << NotConverged(c.options.max_iter, sol.residual_history).what() << '\n';
            return not_converged;
        }
        return ok;
    } catch (...) {
        return report_error(err);
    }
}

struct CompareCell {
    ControlMode mode = ControlMode::DP;
    Topology topology = Topology::Radial;
    std::optional<PowerFlowSolution> solution;
    std::string error;
    double wall_seconds = 0.0;
};

inline CompareCell run_cell(const RunConfig& base, ControlMode mode, Topology topology, int repeats) {
    CompareCell cell;
    cell.mode = mode;
    cell.topology = topology;
    try {
        RunConfig cfg = base;
        cfg.mode = mode;
        cfg.source.topology = topology;
        const auto c = resolve_run(cfg);
        std::vector<double> times;
        for (int r = 0; r < std::max(repeats, 1); ++r) {
            const auto t0 = std::chrono::steady_clock::now();
            auto sol = solve_case(c);
            times.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
            cell.solution = std::move(sol);
        }
        std::sort(times.begin(), times.end());
        cell.wall_seconds = times[times.size() / 2];
    } catch (const std::exception& e) {
        cell.solution.reset();
        cell.error = e.what();
    }
    return cell;
}

inline std::string cell_label(const CompareCell& c) {
    return std::string(to_string(c.mode)) + "-" + to_string(c.topology);
}

inline json compare_to_json(const std::string& name, const std::vector<CompareCell>& cells, bool timing) {
    json doc;
    doc["format_version"] = format_version;
    doc["case"] = name;
    doc["cells"] = json::array();
    for (const auto& c : cells) {
        json jc{{"mode", to_string(c.mode)}, {"topology", to_string(c.topology)}};
        if (c.solution) {
            jc["converged"] = c.solution->converged;
            jc["iterations"] = c.solution->iterations;
            jc["f_hz"] = c.solution->f_hz;
            jc["losses"] = c.solution->losses;
            jc["ders"] = json::array();
            for (const auto& d : c.solution->der_injections) jc["ders"].push_back({{"bus", d.bus}, {"p", d.p}, {"q", d.q}});
        } else {
            jc["converged"] = false;
            jc["error"] = c.error;
        }
        if (timing) jc["wall_time_s"] = c.wall_seconds;
        doc["cells"].push_back(jc);
    }
    return doc;
}

inline std::string compare_injection_csv(const std::vector<CompareCell>& cells) {
    std::ostringstream s;
    s << std::setprecision(17) << "der_bus";
    for (const auto& c : cells) s << ',' << cell_label(c) << "_p," << cell_label(c) << "_q";
    s << '\n';
    std::vector<int> buses;
    for (const auto& c : cells) {
        if (c.solution) {
            for (const auto& d : c.solution->der_injections) buses.push_back(d.bus);
            break;
        }
    }
    for (std::size_t k = 0; k < buses.size(); ++k) {
        s << buses[k];
        for (const auto& c : cells) {
            if (c.solution) {
                s << ',' << c.solution->der_injections[k].p << ',' << c.solution->der_injections[k].q;
            } else {
                s << ",,";
            }
        }
        s << '\n';
    }
    return s.str();
}

inline std::string compare_timing_csv(const std::vector<CompareCell>& cells, bool timing) {
    std::ostringstream s;
    s << std::setprecision(17) << "mode,topology,converged,iterations" << (timing ? ",wall_time_s" : "") << '\n';
    for (const auto& c : cells) {
        s << to_string(c.mode) << ',' << to_string(c.topology) << ',' << (c.solution && c.solution->converged) << ','
          << (c.solution ? c.solution->iterations : 0);
        if (timing) s << ',' << c.wall_seconds;
        s << '\n';
    }
    return s.str();
}

inline void print_compare(std::ostream& out, const std::string& name, const std::vector<CompareCell>& cells,
                          bool timing) {
    out << "case " << name << "\n\nDER injections (p.u.)\n";
    out << "  bus";
    for (const auto& c : cells) out << ' ' << std::setw(17) << cell_label(c);
    out << "\n     ";
    for (std::size_t k = 0; k < cells.size(); ++k) out << "        P        Q";
    out << '\n';
    std::size_t rows = 0;
    for (const auto& c : cells) {
        if (c.solution) rows = std::max(rows, c.solution->der_injections.size());
    }
    for (std::size_t k = 0; k < rows; ++k) {
        int bus = 0;
        for (const auto& c : cells) {
            if (c.solution) bus = c.solution->der_injections[k].bus;
        }
        out << std::setw(5) << bus;
        for (const auto& c : cells) {
            if (c.solution) {
                out << ' ' << std::setw(8) << fixed(c.solution->der_injections[k].p, 4) << std::setw(9)
                    << fixed(c.solution->der_injections[k].q, 4);
            } else {
                out << ' ' << std::setw(17) << "failed";
            }
        }
        out << '\n';
    }
    out << "\nIterations and wall time\n";
    for (const auto& c : cells) {
        out << "  " << std::left << std::setw(12) << cell_label(c) << std::right;
        if (c.solution) {
            out << std::setw(4) << c.solution->iterations << " iterations";
            if (!c.solution->converged) out << " (not converged)";
            if (timing) out << "  " << fixed(c.wall_seconds * 1e3, 3) << " ms";
        } else {
            out << "  failed: " << c.error;
        }
        out << '\n';
    }
}

inline int cmd_compare(const CompareConfig& cfg, std::ostream& out, std::ostream& err) {
    if (cfg.modes.empty() || cfg.topologies.empty()) {
        err << "error: compare needs at least one mode and one topology\n";
        return invalid;
    }
    try {
        const auto name = cfg.base.source.path ? load_case(*cfg.base.source.path).name : cfg.base.source.builtin;
        std::vector<std::future<CompareCell>> jobs;
        for (auto mode : cfg.modes) {
            for (auto topology : cfg.topologies) {
                jobs.push_back(std::async(std::launch::async, run_cell, cfg.base, mode, topology, cfg.repeats));
            }
        }
        std::vector<CompareCell> cells;
        for (auto& j : jobs) cells.push_back(j.get());

        print_compare(out, name, cells, cfg.timing);
        if (cfg.base.out) {
            if (cfg.base.format == ResultFormat::Json) {
                empf::detail::write_text(*cfg.base.out, compare_to_json(name, cells, cfg.timing).dump(2) + "\n");
            } else {
                empf::detail::write_text(*cfg.base.out, compare_injection_csv(cells));
                auto timing_path = *cfg.base.out;
                timing_path.replace_filename(cfg.base.out->stem().string() + "_timing" +
                                             cfg.base.out->extension().string());
                empf::detail::write_text(timing_path, compare_timing_csv(cells, cfg.timing));
            }
        }
        const bool all_ok = std::all_of(cells.begin(), cells.end(),
                                        [](const CompareCell& c) { return c.solution && c.solution->converged; });
        return all_ok ? ok : not_converged;
    } catch (...) {
        return report_error(err);
    }
}

/// Voltage profile CSV: bus_id then one v_pu column per mode.
inline std::string profile_csv(const std::vector<int>& bus_ids, const std::vector<ControlMode>& modes,
                               const std::vector<PowerFlowSolution>& sols) {
    std::ostringstream s;
    s << std::setprecision(17) << "bus_id";
    for (auto m : modes) s << ',' << to_string(m);
    s << '\n';
    for (std::size_t i = 0; i < bus_ids.size(); ++i) {
        s << bus_ids[i];
        for (const auto& sol : sols) s << ',' << sol.state.v[i];
        s << '\n';
    }
    return s.str();
}

inline int cmd_profile(const ProfileConfig& cfg, std::ostream& out, std::ostream& err) {
    try {
        std::vector<PowerFlowSolution> sols;
        std::vector<int> bus_ids;
        for (auto mode : cfg.modes) {
            RunConfig run = cfg.base;
            run.mode = mode;
            sols.push_back(solve_case(resolve_run(run)));
            bus_ids = sols.back().bus_ids;
        }
        const auto csv = profile_csv(bus_ids, cfg.modes, sols);
        if (cfg.base.out) {
            empf::detail::write_text(*cfg.base.out, csv);
        } else {
            out << csv;
        }
        return ok;
    } catch (...) {
        return report_error(err);
    }
}

inline int cmd_validate(const ValidateConfig& cfg, std::ostream& out, std::ostream& err) {
    try {
        const auto c = resolve_case(cfg.source);
        validate_case(c);
        out << "case " << c.name << ": " << c.network.size() << " buses, " << c.network.closed_branch_count()
            << " closed branches, " << c.ders.size() << " DERs, valid\n";
        if (!cfg.audit) return ok;

        const auto result = load_results(*cfg.audit);
        const auto report = oracle::audit_solution(c.network, c.ders, result.solution);
        for (const auto& check : report.checks) {
            out << "  " << (check.passed ? "pass" : "FAIL") << "  " << std::left << std::setw(20) << check.name
                << std::right << " worst " << sci(check.worst) << " (tol " << sci(check.tolerance) << ")\n";
        }
        out << "audit " << (report.passed() ? "passed" : "failed") << '\n';
        return report.passed() ? ok : failure;
    } catch (...) {
        return report_error(err);
    }
}

/// Writes a case file from the builtin data (used to ship data/).
inline int cmd_export(const CaseSource& src, const std::filesystem::path& path, std::ostream& out,
                      std::ostream& err) {
    try {
        const auto c = resolve_case(src);
        save_case(c, path);
        out << "wrote " << path.string() << '\n';
        return ok;
    } catch (...) {
        return report_error(err);
    }
}

namespace detail {

inline const std::map<std::string, ControlMode>& mode_map() {
    static const std::map<std::string, ControlMode> m{
        {"dp", ControlMode::DP}, {"rps", ControlMode::RPS}, {"vr", ControlMode::VR}, {"st", ControlMode::ST}};
    return m;
}

inline const std::map<std::string, Topology>& topology_map() {
    static const std::map<std::string, Topology> m{{"radial", Topology::Radial}, {"meshed", Topology::Meshed}};
    return m;
}

inline void add_source(CLI::App* app, CaseSource& src, std::optional<std::string>& topology) {
    auto* c = app->add_option("--case", src.path, "case file");
    auto* b = app->add_option("--builtin", src.builtin, "builtin case name")->default_val("case33");
    c->excludes(b);
    app->add_option("--topology", topology, "radial or meshed")
        ->check(CLI::IsMember({"radial", "meshed"}));
}

inline void add_run_flags(CLI::App* app, RunConfig& cfg, std::optional<std::string>& format) {
    app->add_option("--leader", cfg.leader, "leader DER bus id");
    app->add_option("--tol-vtheta", cfg.tol_vtheta, "voltage/angle step tolerance")->check(CLI::PositiveNumber);
    app->add_option("--tol-f-rho", cfg.tol_f_rho, "frequency/ratio step tolerance")->check(CLI::PositiveNumber);
    app->add_option("--tol-vd", cfg.tol_vd, "dummy-voltage tolerance")->check(CLI::PositiveNumber);
    app->add_option("--max-iter", cfg.max_iter, "iteration cap")->check(CLI::PositiveNumber);
    app->add_option("--out", cfg.out, "output path");
    app->add_option("--format", format, "json or csv")->check(CLI::IsMember({"json", "csv"}));
    app->add_flag("--exact-loss-jacobian", cfg.exact_loss_jacobian, "differentiate the loss term of the balance row");
    app->add_flag("-v,--verbose", cfg.verbose, "print the residual history");
}

inline void apply_common(RunConfig& cfg, const std::optional<std::string>& topology,
                         const std::optional<std::string>& format) {
    if (topology) cfg.source.topology = topology_map().at(*topology);
    if (format) cfg.format = *format == "csv" ? ResultFormat::Csv : ResultFormat::Json;
}

inline std::vector<ControlMode> to_modes(const std::vector<std::string>& names) {
    std::vector<ControlMode> out;
    for (const auto& n : names) out.push_back(mode_map().at(n));
    return out;
}

}  // namespace detail

/// Parses `args` (without the program name) and runs the selected subcommand.
inline int run_cli(const std::vector<std::string>& args, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
    CLI::App app{"Islanded microgrid power flow with droop and secondary control"};
    app.require_subcommand(1);

    RunConfig run;
    std::optional<std::string> run_topology, run_format, run_mode;
    auto* run_cmd = app.add_subcommand("run", "solve one case in one control mode");
    detail::add_source(run_cmd, run.source, run_topology);
    run_cmd->add_option("--mode", run_mode, "dp, rps, vr or st")->check(CLI::IsMember({"dp", "rps", "vr", "st"}));
    detail::add_run_flags(run_cmd, run, run_format);

    CompareConfig cmp;
    std::optional<std::string> cmp_format;
    std::vector<std::string> cmp_modes, cmp_topologies;
    bool no_timing = false;
    auto* cmp_cmd = app.add_subcommand("compare", "tabulate DER injections and iterations across modes");
    auto* cmp_case = cmp_cmd->add_option("--case", cmp.base.source.path, "case file");
    cmp_cmd->add_option("--builtin", cmp.base.source.builtin, "builtin case name")->excludes(cmp_case);
    cmp_cmd->add_option("--mode", cmp_modes, "modes to compare (default all)")
        ->delimiter(',')
        ->check(CLI::IsMember({"dp", "rps", "vr", "st"}));
    cmp_cmd->add_option("--topology", cmp_topologies, "topologies to compare (default both)")
        ->delimiter(',')
        ->check(CLI::IsMember({"radial", "meshed"}));
    cmp_cmd->add_option("--repeats", cmp.repeats, "timed runs per cell; the median is reported")
        ->check(CLI::PositiveNumber);
    cmp_cmd->add_flag("--no-timing", no_timing, "omit wall times so output is reproducible");
    detail::add_run_flags(cmp_cmd, cmp.base, cmp_format);

    ProfileConfig prof;
    std::optional<std::string> prof_topology, prof_format;
    std::vector<std::string> prof_modes;
    auto* prof_cmd = app.add_subcommand("profile", "bus voltage profile CSV per mode");
    detail::add_source(prof_cmd, prof.base.source, prof_topology);
    prof_cmd->add_option("--mode", prof_modes, "modes to profile (default dp)")
        ->delimiter(',')
        ->check(CLI::IsMember({"dp", "rps", "vr", "st"}));
    detail::add_run_flags(prof_cmd, prof.base, prof_format);

    ValidateConfig val;
    std::optional<std::string> val_topology;
    auto* val_cmd = app.add_subcommand("validate", "lint a case file, optionally auditing a result file");
    detail::add_source(val_cmd, val.source, val_topology);
    val_cmd->add_option("--audit", val.audit, "result file to audit against the case");

    CaseSource exp;
    std::optional<std::string> exp_topology;
    std::filesystem::path exp_out;
    auto* exp_cmd = app.add_subcommand("export", "write a builtin case to a case file");
    exp_cmd->add_option("--builtin", exp.builtin, "builtin case name")->default_val("case33");
    exp_cmd->add_option("--topology", exp_topology, "radial or meshed")->check(CLI::IsMember({"radial", "meshed"}));
    exp_cmd->add_option("--out", exp_out, "output path")->required();

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {
            out << app.help();
            return ok;
        }
        err << "error: " << e.what() << '\n';
        return invalid;
    }

    if (*run_cmd) {
        detail::apply_common(run, run_topology, run_format);
        if (run_mode) run.mode = detail::mode_map().at(*run_mode);
        return cmd_run(run, out, err);
    }
    if (*cmp_cmd) {
        detail::apply_common(cmp.base, std::nullopt, cmp_format);
        if (!cmp_modes.empty()) cmp.modes = detail::to_modes(cmp_modes);
        if (!cmp_topologies.empty()) {
            cmp.topologies.clear();
            for (const auto& t : cmp_topologies) cmp.topologies.push_back(detail::topology_map().at(t));
        }
        cmp.timing = !no_timing;
        return cmd_compare(cmp, out, err);
    }
    if (*prof_cmd) {
        detail::apply_common(prof.base, prof_topology, prof_format);
        if (!prof_modes.empty()) prof.modes = detail::to_modes(prof_modes);
        return cmd_profile(prof, out, err);
    }
    if (*val_cmd) {
        if (val_topology) val.source.topology = detail::topology_map().at(*val_topology);
        return cmd_validate(val, out, err);
    }
    if (exp_topology) exp.topology = detail::topology_map().at(*exp_topology);
    return cmd_export(exp, exp_out, out, err);
}

inline int run_cli(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return run_cli(args);
}

}  // namespace empf::cli
