// castckt: command-line front end.
//
// Exit codes: 0 success, 1 non-finite loss during training, 2 usage or I/O error.

#include <unistd.h>

#include <CLI11.hpp>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <map>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "castckt/io.hpp"
#include "castckt/train.hpp"

namespace fs = std::filesystem;
using namespace castckt;
using ojson = nlohmann::ordered_json;

namespace {

constexpr int kExitNumeric = 1;
constexpr int kExitUsage = 2;

class UsageError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

bool use_color() { return std::getenv("NO_COLOR") == nullptr && isatty(STDOUT_FILENO); }

std::string paint(const std::string& s, nlts::RegimeLabel r) {
    if (!use_color()) return s;
    const char* code = r == nlts::RegimeLabel::Chaotic ? "31" : r == nlts::RegimeLabel::WeakChaotic ? "33" : "32";
    return std::string("\033[") + code + "m" + s + "\033[0m";
}

/// Writes to `path`, or stdout when the path is empty or "-".
template <class F>
void emit(const std::string& path, F&& write) {
    if (path.empty() || path == "-") {
        write(std::cout);
        std::cout.flush();
        return;
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot write '" + path + "'");
    write(out);
    if (!out) throw FormatError("failed writing '" + path + "'");
}

/// "a=1,b=2" -> map; values are numbers.
std::map<std::string, double> parse_params(const std::string& s) {
    std::map<std::string, double> kv;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        const auto eq = item.find('=');
        if (eq == std::string::npos) throw UsageError("--params entry '" + item + "' is not key=value");
        auto v = data::parse_double(item.substr(eq + 1));
        if (!v) throw UsageError("--params value for '" + item.substr(0, eq) + "' is not a number");
        kv[item.substr(0, eq)] = *v;
    }
    return kv;
}

std::vector<double> parse_list(const std::string& s, const char* flag) {
    std::vector<double> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        auto v = data::parse_double(item);
        if (!v) throw UsageError(std::string(flag) + ": '" + item + "' is not a number");
        out.push_back(*v);
    }
    return out;
}

/// Takes known keys out of `kv` with defaults; leftovers are an error.
struct Params {
    std::map<std::string, double> kv;
    double take(const std::string& key, double fallback) {
        auto it = kv.find(key);
        if (it == kv.end()) return fallback;
        const double v = it->second;
        kv.erase(it);
        return v;
    }
    void finish(const std::string& system) const {
        if (!kv.empty()) throw UsageError("unknown parameter '" + kv.begin()->first + "' for system '" + system + "'");
    }
};

std::size_t as_count(double v, const char* what) {
    if (!(v >= 0.0) || v != std::floor(v)) throw UsageError(std::string(what) + " must be a non-negative integer");
    return static_cast<std::size_t>(v);
}

// -- data directories -------------------------------------------------------------

/// A city is a readings CSV plus optional distances.csv / coords.csv beside it.
data::SensorTable load_city_table(const fs::path& readings) {
    auto t = data::read_readings_csv(readings.string());
    const fs::path dir = readings.parent_path();
    if (fs::exists(dir / "distances.csv")) t.distances = data::read_distances_csv((dir / "distances.csv").string(), t.ids);
    if (fs::exists(dir / "coords.csv")) t.coords = data::read_coords_csv((dir / "coords.csv").string(), t.ids);
    return t;
}

struct NamedTable {
    std::string name;
    data::SensorTable table;
};

/// DIR/readings.csv is a single city; otherwise every subdirectory holding a
/// readings.csv is one city (sorted by name). A plain file is read directly.
std::vector<NamedTable> load_data(const std::string& path) {
    const fs::path p(path);
    if (!fs::exists(p)) throw FormatError("data path '" + path + "' does not exist");
    if (fs::is_regular_file(p)) return {{p.stem().string(), load_city_table(p)}};
    if (fs::exists(p / "readings.csv")) return {{p.filename().string(), load_city_table(p / "readings.csv")}};
    std::vector<fs::path> dirs;
    for (const auto& e : fs::directory_iterator(p))
        if (e.is_directory() && fs::exists(e.path() / "readings.csv")) dirs.push_back(e.path());
    std::sort(dirs.begin(), dirs.end());
    if (dirs.empty()) throw FormatError("no readings.csv under '" + path + "'");
    std::vector<NamedTable> out;
    for (const auto& d : dirs) out.push_back({d.filename().string(), load_city_table(d / "readings.csv")});
    return out;
}

struct LoadedCity {
    data::CityData city;
    std::vector<std::string> ids;
};

LoadedCity single_city(const std::string& path, const ModelConfig& mc) {
    auto tables = load_data(path);
    if (tables.size() != 1) throw UsageError("--data must name a single city for this command");
    LoadedCity lc{data::prepare_city(tables[0].table, mc.seq_len, mc.horizon), tables[0].table.ids};
    lc.city.name = tables[0].name;
    return lc;
}

/// Puts a saved model into an evaluation-mode trainer.
void load_into(train::Trainer& tr, const io::SavedModel& m) {
    tr.params().assign_values(m.params);
    tr.set_normalizer(m.normalizer);
}

/// Forward pass over all windows of a city in evaluation mode, batch by batch.
template <class F>
void for_each_batch(train::Trainer& tr, const train::CitySplit& cs, F&& visit) {
    const auto& c = *cs.city;
    const std::size_t B = std::max<std::size_t>(tr.config().batch_size, 1);
    std::vector<std::size_t> idx(c.windows.size());
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t s = 0; s < idx.size(); s += B) {
        const std::size_t e = std::min(idx.size(), s + B);
        const auto span = std::span(idx).subspan(s, e - s);
        auto b = tr.make_batch(c, span, false);
        ForwardOptions opt;
        opt.local_mask = cs.mask ? &*cs.mask : nullptr;
        visit(span, b, forward(b.X, b.C, tr.params(), tr.model_config(), opt));
    }
}

// -- subcommands ------------------------------------------------------------------

struct AnalyzeArgs {
    std::string input, column, out;
    std::size_t m = 5, tau = 0;
};

int run_analyze(const AnalyzeArgs& a) {
    auto t = data::read_readings_csv(a.input);
    data::interpolate_missing(t.readings, t.steps, t.nodes());
    std::size_t col = 0;
    if (!a.column.empty()) {
        auto it = std::find(t.ids.begin(), t.ids.end(), a.column);
        if (it == t.ids.end()) throw UsageError("column '" + a.column + "' not found in " + a.input);
        col = static_cast<std::size_t>(it - t.ids.begin());
    }
    if (t.nodes() == 0) throw FormatError(a.input + ": no data columns");
    nlts::ProfileOptions opt;
    opt.embed_dim = a.m;
    opt.delay = a.tau;
    const auto p = nlts::chaos_profile(t.column(col), opt);
    if (!a.out.empty()) emit(a.out, [&](std::ostream& os) { os << nlts::to_json(p).dump(2) << "\n"; });
    const auto r = nlts::regime_of(p);
    std::cout << "column=" << t.ids[col] << "\n"
              << "regime=" << paint(std::string(nlts::to_string(r)), r) << "\n"
              << "lyapunov=" << data::format_double(p[nlts::Slot::Lyapunov]) << "\n"
              << "degraded=" << (p.degraded ? "true" : "false") << "\n";
    return 0;
}

struct GenArgs {
    std::string system, params, out, coords_out;
    std::size_t n = 1000;
    std::uint64_t seed = 0;
};

int run_gen(const GenArgs& a) {
    Params ps{parse_params(a.params)};
    data::SensorTable t;
    if (a.system == "logistic") {
        const double r = ps.take("r", 4.0), x0 = ps.take("x0", 0.3);
        // step = k keeps every k-th iterate, multiplying the per-sample exponent by k.
        const std::size_t step = as_count(ps.take("step", 1.0), "step");
        if (step == 0) throw UsageError("step must be at least 1");
        ps.finish(a.system);
        t.ids = {"x"};
        const auto all = data::logistic(r, x0, a.n * step);
        for (std::size_t i = 0; i < a.n; ++i) t.readings.push_back(all[i * step + step - 1]);
    } else if (a.system == "lorenz") {
        data::LorenzParams lp;
        lp.sigma = ps.take("sigma", lp.sigma);
        lp.rho = ps.take("rho", lp.rho);
        lp.beta = ps.take("beta", lp.beta);
        lp.dt = ps.take("dt", lp.dt);
        lp.burn_in = as_count(ps.take("burn_in", double(lp.burn_in)), "burn_in");
        ps.finish(a.system);
        t.ids = {"x", "y", "z"};
        for (const auto& s : data::lorenz_states(a.n, lp)) t.readings.insert(t.readings.end(), s.begin(), s.end());
    } else if (a.system == "ar1") {
        const double phi = ps.take("phi", 0.5), sigma = ps.take("sigma", 1.0);
        ps.finish(a.system);
        t.ids = {"x"};
        t.readings = data::ar1(phi, sigma, a.n, a.seed);
    } else if (a.system == "sine") {
        const double period = ps.take("period", 24.0), noise = ps.take("noise", 0.0);
        ps.finish(a.system);
        t.ids = {"x"};
        t.readings = data::sine(period, noise, a.n, a.seed);
    } else if (a.system == "city") {
        // regime: 0 regular, 1 weak, 2 chaotic.
        const auto regime = as_count(ps.take("regime", 1.0), "regime");
        if (regime > 2) throw UsageError("city regime must be 0, 1 or 2");
        data::CityOptions o;
        o.nodes = as_count(ps.take("nodes", 4.0), "nodes");
        o.period = ps.take("period", o.period);
        o.phase_spread = ps.take("phase_spread", o.phase_spread);
        o.steps = a.n;
        ps.finish(a.system);
        t = data::synthetic_city(static_cast<data::CityRegime>(regime), o, a.seed);
    } else {
        throw UsageError("unknown system '" + a.system + "' (expected logistic, lorenz, ar1, sine or city)");
    }
    t.steps = a.n;
    t.timestamps.clear();
    for (std::size_t s = 0; s < a.n; ++s) t.timestamps.push_back(std::to_string(s));
    emit(a.out, [&](std::ostream& os) { data::write_readings_csv(os, t); });
    if (!a.coords_out.empty()) {
        if (!t.coords) throw UsageError("--coords is only available for the city system");
        emit(a.coords_out, [&](std::ostream& os) { data::write_coords_csv(os, t); });
    }
    return 0;
}

struct TrainArgs {
    std::string config, data, out, history;
    std::uint64_t seed = 0;
};

int run_train(const TrainArgs& a) {
    io::RunConfig rc;
    if (!a.config.empty()) rc = io::load_run_config(a.config);
    auto tables = load_data(a.data);
    std::vector<data::CityData> cities;
    cities.reserve(tables.size());
    std::optional<std::size_t> target;
    for (std::size_t i = 0; i < tables.size(); ++i) {
        cities.push_back(data::prepare_city(tables[i].table, rc.model.seq_len, rc.model.horizon, rc.stride));
        cities.back().name = tables[i].name;
        if (tables[i].name == rc.target_city) target = i;
    }
    if (!rc.target_city.empty() && !target) throw UsageError("target_city '" + rc.target_city + "' not found under " + a.data);
    // A lone city is trained as the target; otherwise non-target cities are sources.
    if (cities.size() == 1) target = 0;
    std::vector<const data::CityData*> sources;
    for (std::size_t i = 0; i < cities.size(); ++i)
        if (!target || i != *target) sources.push_back(&cities[i]);

    auto result = train::fit(sources, target ? &cities[*target] : nullptr, rc.model, rc.train, a.seed);
    io::save_model(a.out, {rc.model, result.normalizer, result.params});
    const std::string hist = a.history.empty() ? a.out + ".history.csv" : a.history;
    emit(hist, [&](std::ostream& os) { train::write_history_csv(os, result.history); });
    std::cerr << "trained " << result.history.size() << " epochs on " << cities.size() << " city(ies); model -> " << a.out
              << ", history -> " << hist << "\n";
    return 0;
}


struct PredictArgs {
    std::string model, data, out;
    std::uint64_t seed = 0;
};

/// Forecast dump in the original reading units: per window the fused mean and
/// variance per sensor and horizon step, the fusion weights and the regime of
/// the window's input profile.
int run_predict(const PredictArgs& a) {
    const auto m = io::load_model(a.model);
    auto lc = single_city(a.data, m.config);
    train::Trainer tr(m.config, {}, a.seed);
    load_into(tr, m);
    const auto cs = train::split_city(lc.city, 0.0);
    const auto& c = lc.city;
    const std::size_t N = c.nodes, H = c.horizon;

    ojson doc;
    doc["city"] = c.name;
    doc["sensors"] = lc.ids;
    doc["seq_len"] = c.seq_len;
    doc["horizon"] = H;
    doc["windows"] = ojson::array();
    for_each_batch(tr, cs, [&](std::span<const std::size_t> idx, const train::Batch&, const ModelOutput& out) {
        const auto& f = out.forecast;
        for (std::size_t b = 0; b < idx.size(); ++b) {
            ojson w;
            w["start"] = c.windows[idx[b]].start;
            w["regime"] = std::string(nlts::to_string(nlts::regime_of(tr.window_profile(c, idx[b]))));
            w["fusion_weights"] = {f.omega.at({b, 0}), f.omega.at({b, 1}), f.omega.at({b, 2})};
            ojson mean = ojson::array(), var = ojson::array();
            for (std::size_t i = 0; i < N; ++i) {
                const double q = c.scaler.iqr[i];
                ojson mr = ojson::array(), vr = ojson::array();
                for (std::size_t h = 0; h < H; ++h) {
                    mr.push_back(c.scaler.unscale(f.mean.at({b, i, h}), i));
                    vr.push_back(f.variance.at({b, i, h}) * q * q);
                }
                mean.push_back(std::move(mr));
                var.push_back(std::move(vr));
            }
            w["mean"] = std::move(mean);
            w["variance"] = std::move(var);
            doc["windows"].push_back(std::move(w));
        }
    });
    emit(a.out, [&](std::ostream& os) { os << doc.dump(2) << "\n"; });
    return 0;
}

struct CompareArgs {
    std::string a, b, weights, out;
    std::uint64_t seed = 0;
};

nlts::ChaosProfile read_profile(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open '" + path + "'");
    try {
        return nlts::profile_from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path + ": " + e.what());
    }
}

/// Weighted distance plus per-slot differences a - b.
int run_compare(const CompareArgs& a) {
    const auto pa = read_profile(a.a), pb = read_profile(a.b);
    std::vector<double> w(nlts::kProfileDim, 1.0);
    if (!a.weights.empty()) {
        w = parse_list(a.weights, "--weights");
        if (w.size() != nlts::kProfileDim) throw UsageError("--weights needs 20 comma-separated values");
        for (double v : w)
            if (v < 0.0) throw UsageError("--weights must be non-negative");
    }
    ojson doc;
    doc["distance"] = nlts::profile_distance(pa, pb, w);
    ojson deltas;
    for (std::size_t i = 0; i < nlts::kProfileDim; ++i) deltas[std::string(nlts::kSlotNames[i])] = pa.slots[i] - pb.slots[i];
    doc["deltas"] = std::move(deltas);
    emit(a.out, [&](std::ostream& os) { os << doc.dump(2) << "\n"; });
    return 0;
}

struct CalibrateArgs {
    std::string model, data, alphas = "0.05,0.1,0.32", out;
    std::uint64_t seed = 0;
};

/// Empirical coverage of the central (1 - alpha) Gaussian intervals over every
/// window, sensor and horizon step. Coverage is invariant to the per-sensor
/// affine scaling, so it is computed in scaled units.
int run_calibrate(const CalibrateArgs& a) {
    const auto alphas = parse_list(a.alphas, "--alphas");
    for (double al : alphas)
        if (!(al > 0.0 && al < 1.0)) throw UsageError("--alphas entries must lie in (0, 1)");
    const auto m = io::load_model(a.model);
    auto lc = single_city(a.data, m.config);
    train::Trainer tr(m.config, {}, a.seed);
    load_into(tr, m);
    const auto cs = train::split_city(lc.city, 0.0);
    std::vector<double> y, mu, var;
    for_each_batch(tr, cs, [&](std::span<const std::size_t>, const train::Batch& b, const ModelOutput& out) {
        y.insert(y.end(), b.Y.data().begin(), b.Y.data().end());
        mu.insert(mu.end(), out.forecast.mean.data().begin(), out.forecast.mean.data().end());
        var.insert(var.end(), out.forecast.variance.data().begin(), out.forecast.variance.data().end());
    });
    emit(a.out, [&](std::ostream& os) {
        os << "alpha,nominal,coverage\n";
        for (double al : alphas) {
            os << data::format_double(al) << "," << data::format_double(1.0 - al) << ","
               << data::format_double(forecast::coverage(y, mu, var, al)) << "\n";
        }
    });
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Chaos-aware spatio-temporal forecasting toolkit"};
    app.require_subcommand(1);

    AnalyzeArgs an;
    auto* analyze = app.add_subcommand("analyze", "Chaos profile and regime label of one series");
    analyze->add_option("--input", an.input, "Readings CSV")->required();
    analyze->add_option("--column", an.column, "Sensor column (default: first)");
    analyze->add_option("--out", an.out, "Profile JSON output");
    analyze->add_option("--m", an.m, "Embedding dimension")->check(CLI::PositiveNumber);
    analyze->add_option("--tau", an.tau, "Embedding delay (0: first minimum of mutual information)");

    GenArgs gn;
    auto* gen = app.add_subcommand("gen", "Generate a synthetic series as a readings CSV");
    gen->add_option("--system", gn.system, "logistic | lorenz | ar1 | sine | city")->required();
    gen->add_option("--params", gn.params, "Comma-separated key=value system parameters");
    gen->add_option("-n", gn.n, "Number of samples");
    gen->add_option("--out", gn.out, "Output CSV (default: stdout)");
    gen->add_option("--coords", gn.coords_out, "Sensor coordinates CSV (city only)");

    TrainArgs tn;
    auto* trn = app.add_subcommand("train", "Train a model; writes the model file and a history CSV");
    trn->add_option("--config", tn.config, "Run config (flat key = value)");
    trn->add_option("--data", tn.data, "City directory, or a directory of city directories")->required();
    trn->add_option("--out", tn.out, "Model file")->required();
    trn->add_option("--history", tn.history, "History CSV (default: <out>.history.csv)");

    PredictArgs pr;
    auto* pred = app.add_subcommand("predict", "Forecasts with uncertainty for every window of a city");
    pred->add_option("--model", pr.model, "Model file")->required();
    pred->add_option("--data", pr.data, "City directory or readings CSV")->required();
    pred->add_option("--out", pr.out, "Forecast JSON (default: stdout)");

    CompareArgs cp;
    auto* cmp = app.add_subcommand("compare", "Distance between two chaos profiles");
    cmp->add_option("--a", cp.a, "Profile JSON")->required();
    cmp->add_option("--b", cp.b, "Profile JSON")->required();
    cmp->add_option("--weights", cp.weights, "20 comma-separated slot weights");
    cmp->add_option("--out", cp.out, "Output JSON (default: stdout)");

    CalibrateArgs cl;
    auto* cal = app.add_subcommand("calibrate", "Interval coverage table");
    cal->add_option("--model", cl.model, "Model file")->required();
    cal->add_option("--data", cl.data, "City directory or readings CSV")->required();
    cal->add_option("--alphas", cl.alphas, "Comma-separated miscoverage levels");
    cal->add_option("--out", cl.out, "Coverage CSV (default: stdout)");

    // Every subcommand takes a seed; deterministic ones accept and ignore it.
    std::uint64_t seed = 0;
    for (auto* sub : {analyze, gen, trn, pred, cmp, cal}) sub->add_option("--seed", seed, "Random seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitUsage;
    }
    gn.seed = tn.seed = pr.seed = cp.seed = cl.seed = seed;

    try {
        if (*analyze) return run_analyze(an);
        if (*gen) return run_gen(gn);
        if (*trn) return run_train(tn);
        if (*pred) return run_predict(pr);
        if (*cmp) return run_compare(cp);
        if (*cal) return run_calibrate(cl);
    } catch (const NonFiniteLoss& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    }
    return kExitUsage;
}
