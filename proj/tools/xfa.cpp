// xfa: simulate factor-model data, fit the sparse factor model over a
// hyperparameter grid, and evaluate estimates.
//
// Exit codes: 0 success, 2 input or configuration error, 3 numerical failure.

#include "xfa/io.hpp"
#include "xfa/xfa.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace xfa;

namespace {

constexpr int exit_input = 2;
constexpr int exit_numerical = 3;

/// Settings shared by all subcommands: defaults, then --config, then flags.
struct Settings
{
    ScenarioSpec scenario;
    std::optional<std::uint64_t> seed;
    int threads = 1;
    std::string out = ".";

    Index k_max = 0; // 0: min(10, P)
    Condition condition = Condition::I;
    RateVariant rate;
    std::vector<double> grid_rho;
    std::vector<double> grid_delta;
    FitOptions fit;
    int init_iters = 50;
    double level = 0.95;

    std::string data;
    std::string estimate;
    std::string truth;
    std::string from;
    double threshold = 0.0;
    bool rotate = false;
};

/// Flags as parsed; unset optionals leave config and defaults alone.
struct Flags
{
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<int> threads;
    std::optional<std::string> out;
    std::optional<Index> p, k, n, k_max;
    std::optional<std::string> scenario, truth_prior, condition;
    std::vector<double> grid_rho, grid_delta;
    std::optional<std::string> data, estimate, truth, from;
    std::optional<double> threshold, level;
    bool rotate = false;
};

template <class T>
T get(const json& j, const std::string& key)
{
    try {
        return j.at(key).get<T>();
    } catch (const json::exception&) {
        throw InvalidArgument("config key '" + key + "' has the wrong type");
    }
}

void apply_config(const json& j, Settings& s)
{
    if (!j.is_object()) throw InvalidArgument("config must be a JSON object");
    // written into manifests and reports; ignored on input
    static const std::set<std::string> metadata{"command", "version", "files"};
    for (const auto& [key, value] : j.items()) {
        if (metadata.count(key)) continue;
        if (key == "seed") s.seed = get<std::uint64_t>(j, key);
        else if (key == "threads") s.threads = get<int>(j, key);
        else if (key == "out") s.out = get<std::string>(j, key);
        else if (key == "scenario") parse_scenario(get<std::string>(j, key), s.scenario);
        else if (key == "truth_prior") s.scenario.truth_prior = parse_truth_prior(get<std::string>(j, key));
        else if (key == "P") s.scenario.P = get<Index>(j, key);
        else if (key == "K") s.scenario.K = get<Index>(j, key);
        else if (key == "N") s.scenario.N = get<Index>(j, key);
        else if (key == "mgp_first_shape") s.scenario.mgp_first_shape = get<double>(j, key);
        else if (key == "mgp_later_shape") s.scenario.mgp_later_shape = get<double>(j, key);
        else if (key == "mgp_local_shape") s.scenario.mgp_local_shape = get<double>(j, key);
        else if (key == "uniform_low") s.scenario.uniform_low = get<double>(j, key);
        else if (key == "uniform_high") s.scenario.uniform_high = get<double>(j, key);
        else if (key == "resid_low") s.scenario.resid_low = get<double>(j, key);
        else if (key == "resid_high") s.scenario.resid_high = get<double>(j, key);
        else if (key == "high_snr") s.scenario.high_snr = get<double>(j, key);
        else if (key == "low_snr") s.scenario.low_snr = get<double>(j, key);
        else if (key == "k_max") s.k_max = get<Index>(j, key);
        else if (key == "condition") s.condition = parse_condition(get<std::string>(j, key));
        else if (key == "rate_gamma") s.rate = {RateKind::PowerGamma, get<double>(j, key)};
        else if (key == "grid_rho") s.grid_rho = get<std::vector<double>>(j, key);
        else if (key == "grid_delta") s.grid_delta = get<std::vector<double>>(j, key);
        else if (key == "max_outer_iters") s.fit.max_outer_iters = get<int>(j, key);
        else if (key == "max_inner_iters") s.fit.max_inner_iters = get<int>(j, key);
        else if (key == "outer_tol") s.fit.outer_tol = get<double>(j, key);
        else if (key == "inner_tol") s.fit.inner_tol = get<double>(j, key);
        else if (key == "accelerate") s.fit.accelerate = get<bool>(j, key);
        else if (key == "init_iters") s.init_iters = get<int>(j, key);
        else if (key == "level") s.level = get<double>(j, key);
        else if (key == "data") s.data = get<std::string>(j, key);
        else if (key == "estimate") s.estimate = get<std::string>(j, key);
        else if (key == "truth") s.truth = get<std::string>(j, key);
        else if (key == "from") s.from = get<std::string>(j, key);
        else if (key == "threshold") s.threshold = get<double>(j, key);
        else if (key == "rotate") s.rotate = get<bool>(j, key);
        else throw InvalidArgument("unknown config key '" + key + "'");
    }
}

json read_json(const std::string& path)
{
    std::ifstream in(path);
    if (!in) throw InvalidArgument("cannot read " + path);
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw InvalidArgument(path + ": " + e.what());
    }
}

Settings resolve(const Flags& f)
{
    Settings s;
    if (!f.config.empty()) {
        if (fs::path(f.config).extension() == ".toml")
            throw InvalidArgument("TOML configs are not supported; pass the same keys as a JSON object");
        apply_config(read_json(f.config), s);
    }
    if (f.seed) s.seed = f.seed;
    if (f.threads) s.threads = *f.threads;
    if (f.out) s.out = *f.out;
    if (f.p) s.scenario.P = *f.p;
    if (f.k) s.scenario.K = *f.k;
    if (f.n) s.scenario.N = *f.n;
    if (f.k_max) s.k_max = *f.k_max;
    if (f.scenario) parse_scenario(*f.scenario, s.scenario);
    if (f.truth_prior) s.scenario.truth_prior = parse_truth_prior(*f.truth_prior);
    if (f.condition) s.condition = parse_condition(*f.condition);
    if (!f.grid_rho.empty()) s.grid_rho = f.grid_rho;
    if (!f.grid_delta.empty()) s.grid_delta = f.grid_delta;
    if (f.data) s.data = *f.data;
    if (f.estimate) s.estimate = *f.estimate;
    if (f.truth) s.truth = *f.truth;
    if (f.from) s.from = *f.from;
    if (f.threshold) s.threshold = *f.threshold;
    if (f.level) s.level = *f.level;
    if (f.rotate) s.rotate = true;

    require(s.threads >= 1, "--threads must be at least 1");
    s.fit.threads = s.threads;
    for (const std::string* path : {&s.data, &s.estimate, &s.truth, &s.from})
        if (!path->empty() && !fs::exists(*path)) throw InvalidArgument("no such file or directory: " + *path);
    return s;
}

fs::path prepare_out(const std::string& dir)
{
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw InvalidArgument("cannot create output directory " + dir);
    return fs::path(dir);
}

void write_json(const fs::path& path, const json& j)
{
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InvalidArgument("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

// JSON has no infinities; excluded cells carry null.
json finite_or_null(double x) { return std::isfinite(x) ? json(x) : json(nullptr); }

double seconds_since(std::chrono::steady_clock::time_point t0)
{
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

int cmd_simulate(const Settings& s)
{
    if (!s.seed) throw InvalidArgument("simulate requires a seed (--seed or \"seed\" in the config)");
    ScenarioSpec spec = s.scenario;
    spec.seed = *s.seed;
    validate(spec);
    const SimulatedScenario sim = simulate_scenario(spec);

    const fs::path out = prepare_out(s.out);
    io::write_csv((out / "data.csv").string(), sim.data);
    io::write_csv((out / "truth_loadings.csv").string(), sim.loadings);
    io::write_csv((out / "truth_resid.csv").string(), sim.resid_vars);

    json m;
    m["command"] = "simulate";
    m["version"] = version;
    m["seed"] = spec.seed;
    m["scenario"] = scenario_name(spec);
    m["truth_prior"] = to_string(spec.truth_prior);
    m["P"] = spec.P;
    m["K"] = spec.K;
    m["N"] = spec.n_samples();
    m["mgp_first_shape"] = spec.mgp_first_shape;
    m["mgp_later_shape"] = spec.mgp_later_shape;
    m["mgp_local_shape"] = spec.mgp_local_shape;
    m["uniform_low"] = spec.uniform_low;
    m["uniform_high"] = spec.uniform_high;
    m["resid_low"] = spec.resid_low;
    m["resid_high"] = spec.resid_high;
    m["high_snr"] = spec.high_snr;
    m["low_snr"] = spec.low_snr;
    m["files"] = {{"data", "data.csv"}, {"truth_loadings", "truth_loadings.csv"}, {"truth_resid", "truth_resid.csv"}};
    write_json(out / "manifest.json", m);
    return 0;
}

GridSpec make_grid(const Settings& s, Index K)
{
    GridSpec g = default_grid(K, s.condition, s.rate);
    if (!s.grid_rho.empty()) g.rho_values = s.grid_rho;
    if (!s.grid_delta.empty()) g.delta_values = s.grid_delta;
    validate(g);
    for (double rho : g.rho_values)
        for (double delta : g.delta_values) detail::check_delta_rho(delta, rho, g.condition);
    return g;
}

Index nonzero_columns(const Matrix& loadings) { return selected_factors(loadings); }

std::string surface_row(double rho, double delta, double log_marginal, double log_weight, Index active)
{
    return io::format_double(rho) + "," + io::format_double(delta) + "," + io::format_double(log_marginal) + "," +
           io::format_double(log_weight) + "," + std::to_string(active) + "\n";
}

void write_text(const fs::path& path, const std::string& text)
{
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InvalidArgument("cannot write " + path.string());
    out << text;
}

int cmd_fit(const Settings& s)
{
    if (s.data.empty()) throw InvalidArgument("fit requires --data");
    const auto t_start = std::chrono::steady_clock::now();
    const Matrix y = io::read_csv(s.data);
    if (!y.allFinite()) throw InvalidArgument(s.data + " contains non-finite values");
    require(y.rows() >= 3, "need at least 3 observations");
    const SampleCov cov = sample_cov(y);
    const Index P = cov.p_vars();
    const Index K = s.k_max > 0 ? s.k_max : std::min<Index>(10, P);
    require(K <= P, "--k-max exceeds the number of variables");
    const GridSpec grid = make_grid(s, K);
    validate(s.fit);
    require(s.level > 0.0 && s.level < 1.0, "--level must lie in (0, 1)");
    require(s.init_iters >= 1, "init_iters must be at least 1");
    const fs::path out = prepare_out(s.out);

    const auto t_grid = std::chrono::steady_clock::now();
    const GridResult r = run_bma(cov, grid, s.fit, s.init_iters);
    const double grid_seconds = seconds_since(t_grid);

    const auto t_ci = std::chrono::steady_clock::now();
    const CredibleIntervals ci = credible_intervals(r, cov.n_samples(), s.level);
    const Matrix thresholded = threshold_by_intervals(r.averaged_loadings, ci);
    const double ci_seconds = seconds_since(t_ci);

    io::write_csv((out / "loadings_avg.csv").string(), r.averaged_loadings);
    io::write_csv((out / "loadings_thresholded.csv").string(), thresholded);
    io::write_csv((out / "resid_avg.csv").string(), r.averaged_resid);

    std::string intervals = "variable,factor,estimate,lower,upper\n";
    for (Index p = 0; p < P; ++p)
        for (Index k = 0; k < K; ++k)
            intervals += std::to_string(p + 1) + "," + std::to_string(k + 1) + "," +
                         io::format_double(r.averaged_loadings(p, k)) + "," + io::format_double(ci.lower(p, k)) + "," +
                         io::format_double(ci.upper(p, k)) + "\n";
    write_text(out / "intervals.csv", intervals);

    std::string surface = "rho,delta,log_marginal,log_weight,n_active_columns\n";
    const fs::path cells_dir = out / "per_cell";
    fs::create_directories(cells_dir);
    json cells = json::array();
    for (std::size_t g = 0; g < r.cells.size(); ++g) {
        const GridCell& c = r.cells[g];
        const Matrix& L = c.fit.state.loadings;
        const double lm = r.log_marginals(static_cast<Index>(g));
        const double lw = r.log_weights(static_cast<Index>(g));
        surface += surface_row(c.rho, c.delta, lm, lw, nonzero_columns(L));

        json nz = json::array();
        for (Index k = 0; k < K; ++k) nz.push_back((L.col(k).array() != 0.0).count());
        json cell;
        cell["index"] = g;
        cell["rho"] = c.rho;
        cell["delta"] = c.delta;
        cell["converged"] = c.fit.converged;
        cell["n_outer_iters"] = c.fit.n_outer_iters;
        cell["objective"] = finite_or_null(c.fit.objective);
        cell["log_marginal"] = finite_or_null(lm);
        cell["log_weight"] = finite_or_null(lw);
        cell["n_active_columns"] = nonzero_columns(L);
        cell["nonzeros_per_column"] = nz;
        cell["floored_variables"] = c.fit.floored;
        cell["excluded"] = r.excluded[g];
        char name[32];
        std::snprintf(name, sizeof name, "cell_%03zu", g);
        write_json(cells_dir / (std::string(name) + ".json"), cell);
        io::write_csv((cells_dir / (std::string(name) + "_loadings.csv")).string(), L);
        cells.push_back(std::move(cell));
    }
    write_text(out / "weights_surface.csv", surface);

    json report;
    report["command"] = "fit";
    report["version"] = version;
    report["data"] = s.data;
    report["N"] = cov.n_samples();
    report["P"] = P;
    report["k_max"] = K;
    report["condition"] = to_string(grid.condition);
    report["rate"] = grid.rate_variant.kind == RateKind::LogN ? json("log") : json(grid.rate_variant.gamma);
    report["grid_rho"] = grid.rho_values;
    report["grid_delta"] = grid.delta_values;
    report["fit_options"] = {{"max_outer_iters", s.fit.max_outer_iters}, {"max_inner_iters", s.fit.max_inner_iters},
                             {"outer_tol", s.fit.outer_tol},           {"inner_tol", s.fit.inner_tol},
                             {"accelerate", s.fit.accelerate},         {"init_iters", s.init_iters}};
    report["level"] = s.level;
    report["selected_factors"] = selected_factors(thresholded);
    report["selected_factors_unthresholded"] = selected_factors(r.averaged_loadings);
    report["converged_cells"] =
        std::count_if(r.cells.begin(), r.cells.end(), [](const GridCell& c) { return c.fit.converged; });
    report["intervals_flagged"] = ci.flagged.size();
    report["cells"] = cells;
    write_json(out / "fit_report.json", report);

    // kept apart so the other outputs stay byte-identical across reruns
    json timings;
    timings["grid_and_marginals_seconds"] = grid_seconds;
    timings["intervals_seconds"] = ci_seconds;
    timings["total_seconds"] = seconds_since(t_start);
    timings["threads"] = s.threads;
    write_json(out / "timings.json", timings);
    return 0;
}

int cmd_evaluate(const Settings& s)
{
    if (s.estimate.empty()) throw InvalidArgument("evaluate requires --estimate");
    Matrix est = io::read_csv(s.estimate);
    if (s.rotate) est = lower_triangular_rotate(est);
    const Index K = est.cols();

    std::string csv = "metric,k,value\n";
    auto row = [&csv](const std::string& metric, const std::string& k, const std::string& value) {
        csv += metric + "," + k + "," + value + "\n";
    };
    for (Index k = 1; k <= K; ++k) row("cnnl", std::to_string(k), std::to_string(cnnl(est, k, s.threshold)));
    if (!s.data.empty()) {
        const SampleCov cov = sample_cov(io::read_csv(s.data));
        require(cov.p_vars() == est.rows(), "estimate and data disagree on the number of variables");
        for (Index k = 1; k <= K; ++k) row("cpev", std::to_string(k), io::format_double(cpev(est, cov, k)));
    }
    row("selected_factors", "", std::to_string(selected_factors(est, s.threshold)));
    if (!s.truth.empty()) {
        Matrix truth = io::read_csv(s.truth);
        require(truth.rows() == est.rows(), "estimate has " + std::to_string(est.rows()) + " rows but truth has " +
                                                std::to_string(truth.rows()));
        pad_columns(est, truth);
        row("rmse", "", io::format_double(rmse(est, truth)));
    }
    const fs::path out = prepare_out(s.out);
    write_text(out / "metrics.csv", csv);
    return 0;
}

int cmd_weights_surface(const Settings& s)
{
    if (s.from.empty()) throw InvalidArgument("weights-surface requires --from <fit output directory>");
    const json report = read_json((fs::path(s.from) / "fit_report.json").string());
    std::string surface = "rho,delta,log_marginal,log_weight,n_active_columns\n";
    const double minus_inf = -std::numeric_limits<double>::infinity();
    try {
        for (const auto& c : report.at("cells")) {
            const double lm = c.at("log_marginal").is_null() ? minus_inf : c.at("log_marginal").get<double>();
            const double lw = c.at("log_weight").is_null() ? minus_inf : c.at("log_weight").get<double>();
            surface += surface_row(c.at("rho").get<double>(), c.at("delta").get<double>(), lm, lw,
                                   c.at("n_active_columns").get<Index>());
        }
    } catch (const json::exception& e) {
        throw InvalidArgument("malformed fit_report.json: " + std::string(e.what()));
    }
    if (s.out == "-") {
        std::cout << surface;
        return 0;
    }
    write_text(prepare_out(s.out) / "weights_surface.csv", surface);
    return 0;
}

void add_common(CLI::App& sub, Flags& f)
{
    sub.add_option("--config", f.config, "JSON config; flags override its keys")->check(CLI::ExistingFile);
    sub.add_option("--seed", f.seed, "master seed");
    sub.add_option("--threads", f.threads, "worker threads");
    sub.add_option("--out", f.out, "output directory");
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Sparse Bayesian factor analysis: simulate, fit, evaluate"};
    app.set_version_flag("--version", std::string(version));
    app.require_subcommand(1);
    Flags f;

    CLI::App* sim = app.add_subcommand("simulate", "generate a scenario: data.csv, truth files, manifest.json");
    add_common(*sim, f);
    sim->add_option("--p", f.p, "number of variables");
    sim->add_option("--k", f.k, "number of true factors");
    sim->add_option("--n", f.n, "number of observations (default ceil(P log P))");
    sim->add_option("--scenario", f.scenario, "sparse-high | sparse-low | dense-high | dense-low");
    sim->add_option("--truth-prior", f.truth_prior, "mgp | uniform");

    CLI::App* fit = app.add_subcommand("fit", "fit the grid, average models, write estimates and intervals");
    add_common(*fit, f);
    fit->add_option("--data", f.data, "N x P data matrix (CSV, no header)");
    fit->add_option("--k-max", f.k_max, "number of loadings columns (default min(10, P))");
    fit->add_option("--grid-rho", f.grid_rho, "rho values, strictly descending")->delimiter(',');
    fit->add_option("--grid-delta", f.grid_delta, "delta values, strictly ascending, > 2")->delimiter(',');
    fit->add_option("--condition", f.condition, "I | II | III");
    fit->add_option("--level", f.level, "credible level for intervals (default 0.95)");

    CLI::App* eval = app.add_subcommand("evaluate", "CNNL, CPEV, RMSE and selected factors of an estimate");
    add_common(*eval, f);
    eval->add_option("--estimate", f.estimate, "P x K loadings (CSV)");
    eval->add_option("--truth", f.truth, "true loadings (CSV); enables RMSE");
    eval->add_option("--data", f.data, "data matrix (CSV); enables CPEV");
    eval->add_option("--threshold", f.threshold, "treat |loading| <= threshold as zero (default 0: exact zeros)");
    eval->add_flag("--rotate", f.rotate, "rotate the estimate to lower-triangular form first");

    CLI::App* surf = app.add_subcommand("weights-surface", "re-emit weights_surface.csv from a saved fit");
    add_common(*surf, f);
    surf->add_option("--from", f.from, "output directory of a previous fit");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : exit_input;
    }

    try {
        const Settings s = resolve(f);
        if (sim->parsed()) return cmd_simulate(s);
        if (fit->parsed()) return cmd_fit(s);
        if (eval->parsed()) return cmd_evaluate(s);
        return cmd_weights_surface(s);
    } catch (const InvalidArgument& e) {
        std::cerr << "xfa: " << e.what() << '\n';
        return exit_input;
    } catch (const NumericalError& e) {
        std::cerr << "xfa: numerical failure: " << e.what() << '\n';
        return exit_numerical;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "xfa: " << e.what() << '\n';
        return exit_input;
    } catch (const json::exception& e) {
        std::cerr << "xfa: " << e.what() << '\n';
        return exit_input;
    } catch (const std::exception& e) {
        std::cerr << "xfa: internal error: " << e.what() << '\n';
        return 1;
    }
}
