#pragma once

#include "kercnn/synth.hpp"
#include "kercnn/trainer.hpp"

#include "json.hpp"

#include <algorithm>
#include <ctime>
#include <iomanip>
#include <map>
#include <tuple>

namespace kercnn {

// ---------------------------------------------------------------------------
// Sweeps: train a grid of (architecture, seed) models, evaluate each across
// a corruption grid, persist the records incrementally, summarise.
//
// Results live in a CSV (schema below) with a JSON sidecar holding the full
// configuration and its digest. Reruns with the same digest skip finished
// cells, so interrupted sweeps resume; reruns of a finished sweep leave the
// file byte-identical. A kercnn model with stopping times (1, 1) computes
// exactly what the base cnn computes, so those two share one trained model.
// ---------------------------------------------------------------------------

inline constexpr const char* kRecordsCsvHeader = "variant,T1,T2,kind,severity,seed,accuracy,n";

struct ExperimentRecord {
    std::string variant;       // cnn | kercnn | reccnn
    int t1 = 1, t2 = 1;        // kercnn stopping times; reccnn stores (recT, 0)
    std::string kind = "none";
    double severity = 0.0;
    std::uint64_t seed = 0;
    double accuracy = 0.0;
    int n = 0;
    std::string timestamp;     // informational, not persisted in the CSV
    std::string digest;        // sweep config digest, persisted in the sidecar

    bool same_cell(const ExperimentRecord& o) const {
        return variant == o.variant && t1 == o.t1 && t2 == o.t2 && kind == o.kind &&
               severity == o.severity && seed == o.seed;
    }
};

struct CorruptionGrid {
    std::string kind;                 // none | patches | strips | fgsm
    std::vector<double> severities;
};

struct SweepConfig {
    std::string dataset = "synth";    // mnist | kmnist | fashion | synth
    std::string data_root;            // empty: use KERCNN_DATA_ROOT
    std::vector<std::string> variants = {"cnn", "kercnn"};
    std::vector<std::array<int, 2>> t_grid = {{3, 2}};  // kercnn combos
    std::vector<int> rec_steps = {3};                   // reccnn clocks
    std::vector<CorruptionGrid> corruptions = {{"none", {0.0}}};
    std::vector<std::uint64_t> seeds = {1, 2, 3};
    int train_subset = 10000;         // 0 = all
    int val_count = 1000;
    int test_subset = 2000;           // 0 = all
    int max_epochs = 15;
    int batch_size = 50;
    int patience = 10;
    double lr = 0.001;
    double l2_lambda = 0.0005;
    double recurrent_dropout = 0.2;
    int patch_count = 4;
    int strip_thickness = 2;

    void validate() const {
        if (variants.empty()) throw std::invalid_argument("sweep: no variants");
        if (corruptions.empty()) throw std::invalid_argument("sweep: no corruption grid");
        if (seeds.empty()) throw std::invalid_argument("sweep: no seeds");
        for (const auto& v : variants) {
            if (v != "cnn" && v != "kercnn" && v != "reccnn")
                throw std::invalid_argument("sweep: unknown variant " + v);
            if (v == "kercnn" && t_grid.empty())
                throw std::invalid_argument("sweep: kercnn needs a stopping-time grid");
            if (v == "reccnn" && rec_steps.empty())
                throw std::invalid_argument("sweep: reccnn needs rec_steps");
        }
        for (const auto& g : corruptions) {
            corruption_from(g.kind);
            if (g.severities.empty())
                throw std::invalid_argument("sweep: empty severity list for " + g.kind);
            for (double s : g.severities)
                if (s < 0.0) throw std::invalid_argument("sweep: negative severity");
        }
        for (const auto& t : t_grid)
            if (t[0] < 1 || t[1] < 1) throw std::invalid_argument("sweep: stopping times >= 1");
        for (int r : rec_steps)
            if (r < 1) throw std::invalid_argument("sweep: rec_steps >= 1");
        if (val_count < 0 || train_subset < 0 || test_subset < 0)
            throw std::invalid_argument("sweep: negative subset sizes");
        if (max_epochs < 1) throw std::invalid_argument("sweep: max_epochs >= 1");
    }
};

// ---------------------------------------------------------------------------
// SweepConfig <-> JSON
// ---------------------------------------------------------------------------

inline nlohmann::json sweep_to_json(const SweepConfig& c) {
    nlohmann::json j;
    j["dataset"] = c.dataset;
    j["data_root"] = c.data_root;
    j["variants"] = c.variants;
    j["t_grid"] = c.t_grid;
    j["rec_steps"] = c.rec_steps;
    j["corruptions"] = nlohmann::json::array();
    for (const auto& g : c.corruptions)
        j["corruptions"].push_back({{"kind", g.kind}, {"severities", g.severities}});
    j["seeds"] = c.seeds;
    j["train_subset"] = c.train_subset;
    j["val_count"] = c.val_count;
    j["test_subset"] = c.test_subset;
    j["max_epochs"] = c.max_epochs;
    j["batch_size"] = c.batch_size;
    j["patience"] = c.patience;
    j["lr"] = c.lr;
    j["l2_lambda"] = c.l2_lambda;
    j["recurrent_dropout"] = c.recurrent_dropout;
    j["patch_count"] = c.patch_count;
    j["strip_thickness"] = c.strip_thickness;
    return j;
}

inline SweepConfig sweep_from_json(const nlohmann::json& j) {
    SweepConfig c;
    c.dataset = j.value("dataset", c.dataset);
    c.data_root = j.value("data_root", c.data_root);
    if (j.contains("variants")) c.variants = j["variants"].get<std::vector<std::string>>();
    if (j.contains("t_grid")) c.t_grid = j["t_grid"].get<std::vector<std::array<int, 2>>>();
    if (j.contains("rec_steps")) c.rec_steps = j["rec_steps"].get<std::vector<int>>();
    if (j.contains("corruptions")) {
        c.corruptions.clear();
        for (const auto& g : j["corruptions"])
            c.corruptions.push_back(
                {g.at("kind").get<std::string>(), g.at("severities").get<std::vector<double>>()});
    }
    if (j.contains("seeds")) c.seeds = j["seeds"].get<std::vector<std::uint64_t>>();
    c.train_subset = j.value("train_subset", c.train_subset);
    c.val_count = j.value("val_count", c.val_count);
    c.test_subset = j.value("test_subset", c.test_subset);
    c.max_epochs = j.value("max_epochs", c.max_epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.patience = j.value("patience", c.patience);
    c.lr = j.value("lr", c.lr);
    c.l2_lambda = j.value("l2_lambda", c.l2_lambda);
    c.recurrent_dropout = j.value("recurrent_dropout", c.recurrent_dropout);
    c.patch_count = j.value("patch_count", c.patch_count);
    c.strip_thickness = j.value("strip_thickness", c.strip_thickness);
    c.validate();
    return c;
}

inline SweepConfig load_sweep_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open sweep config " + path);
    nlohmann::json j;
    is >> j;
    return sweep_from_json(j);
}

// The digest covers the canonical config serialisation plus the dataset the
// sweep actually ran on (`resolved`), so results produced by the synthetic
// fallback can never be silently extended with real-data records.
inline std::string sweep_digest(const SweepConfig& c, const std::string& resolved) {
    nlohmann::json j = sweep_to_json(c);
    j["resolved"] = resolved;
    const std::string s = j.dump();
    return hex64(fnv1a(s.data(), s.size()));
}

// ---------------------------------------------------------------------------
// Records CSV
// ---------------------------------------------------------------------------

namespace detail {

// shortest decimal that parses back to the same double, so resumed sweeps
// recognise their own cells
inline std::string format_severity(double v) { return nlohmann::json(v).dump(); }

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            out.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(ch);
        }
    }
    out.push_back(cur);
    return out;
}

}  // namespace detail

inline std::string record_csv_line(const ExperimentRecord& r) {
    std::ostringstream os;
    os << r.variant << ',' << r.t1 << ',' << r.t2 << ',' << r.kind << ','
       << detail::format_severity(r.severity) << ',' << r.seed << ',' << std::fixed
       << std::setprecision(8) << r.accuracy << ',' << r.n;
    return os.str();
}

inline std::vector<ExperimentRecord> load_records_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open records file " + path);
    std::string line;
    if (!std::getline(is, line)) return {};
    if (line != kRecordsCsvHeader)
        throw std::runtime_error("unexpected records header in " + path);
    std::vector<ExperimentRecord> out;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto f = detail::split_csv_line(line);
        if (f.size() != 8) throw std::runtime_error("malformed record line: " + line);
        ExperimentRecord r;
        r.variant = f[0];
        r.t1 = std::stoi(f[1]);
        r.t2 = std::stoi(f[2]);
        r.kind = f[3];
        r.severity = std::stod(f[4]);
        r.seed = std::stoull(f[5]);
        r.accuracy = std::stod(f[6]);
        r.n = std::stoi(f[7]);
        out.push_back(std::move(r));
    }
    return out;
}

// ---------------------------------------------------------------------------
// run_sweep
// ---------------------------------------------------------------------------

namespace detail {

struct SweepArch {
    std::string variant;  // label for records
    int t1 = 1, t2 = 1;   // reccnn: (recT, 0)
    std::string model_key() const {
        // kercnn(1, 1) trains the identical model as the base cnn
        if (variant == "kercnn" && t1 == 1 && t2 == 1) return "cnn/1/1";
        return variant + "/" + std::to_string(t1) + "/" + std::to_string(t2);
    }
};

inline std::vector<SweepArch> expand_archs(const SweepConfig& c) {
    std::vector<SweepArch> out;
    for (const auto& v : c.variants) {
        if (v == "cnn") out.push_back({"cnn", 1, 1});
        if (v == "kercnn")
            for (const auto& t : c.t_grid) out.push_back({"kercnn", t[0], t[1]});
        if (v == "reccnn")
            for (int r : c.rec_steps) out.push_back({"reccnn", r, 0});
    }
    return out;
}

inline ModelConfig arch_model_config(const SweepConfig& c, const SweepArch& a) {
    ModelConfig mc;
    if (a.variant == "cnn")
        mc = ModelConfig::mnist_cnn();
    else if (a.variant == "kercnn")
        mc = ModelConfig::mnist_kercnn(a.t1, a.t2);
    else
        mc = ModelConfig::mnist_reccnn(a.t1);
    mc.recurrent_dropout = c.recurrent_dropout;
    return mc;
}

inline std::string timestamp_now() {
    const std::time_t t = std::time(nullptr);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%S", std::gmtime(&t));
    return buf;
}

}  // namespace detail

template <typename T>
struct SweepData {
    Dataset<T> train, val, test;
    std::string resolved;  // dataset actually used ("synth" on fallback)
};

// Shared data for every cell of a sweep: resolve the named dataset (falling
// back to synthetic digits when no IDX files are found), subset, split,
// z-score with training statistics.
template <typename T>
SweepData<T> prepare_sweep_data(const SweepConfig& cfg, std::ostream* log = nullptr) {
    SweepData<T> out;
    Dataset<T> train_full, test_full;
    std::string root = cfg.data_root.empty() ? data_root_from_env() : cfg.data_root;
    if (cfg.dataset != "synth" && dataset_available(cfg.dataset, root)) {
        std::tie(train_full, test_full) = load_dataset_pair<T>(cfg.dataset, root);
        out.resolved = cfg.dataset;
    } else {
        if (cfg.dataset != "synth" && log != nullptr)
            *log << "warning: dataset '" << cfg.dataset << "' not found under '" << root
                 << "', falling back to synthetic digits\n";
        const int want_train = cfg.train_subset > 0 ? cfg.train_subset + cfg.val_count : 60000;
        const int want_test = cfg.test_subset > 0 ? cfg.test_subset : 10000;
        train_full = make_synth_dataset<T>(want_train, 0xDA7A0001ull);
        test_full = make_synth_dataset<T>(want_test, 0xDA7A0002ull);
        out.resolved = "synth";
    }
    Dataset<T> pool = shuffled_subset(
        train_full, cfg.train_subset > 0 ? cfg.train_subset + cfg.val_count : 0, 0x5B5E7ull);
    std::tie(out.train, out.val) = split_train_val(pool, cfg.val_count, 0x57117ull);
    out.test = shuffled_subset(test_full, cfg.test_subset, 0x7E57ull);
    const ZScoreStats st = zscore_fit(out.train);
    zscore_apply(out.train, st);
    if (out.val.n() > 0) zscore_apply(out.val, st);
    zscore_apply(out.test, st);
    return out;
}

struct SweepOutput {
    std::vector<ExperimentRecord> records;  // resumed + fresh, file order
    std::string digest;
    int trained = 0;  // models trained this run
    int skipped = 0;  // cells already present
};

// Train / evaluate every cell, appending each fresh record to `csv_path`
// as it lands. A sidecar `<csv_path>.meta.json` pins the config digest;
// rerunning against a file with a different digest is refused.
template <typename T = float>
SweepOutput run_sweep(const SweepConfig& cfg, const std::string& csv_path,
                      std::ostream* log = nullptr) {
    cfg.validate();
    const SweepData<T> data = prepare_sweep_data<T>(cfg, log);
    SweepOutput out;
    out.digest = sweep_digest(cfg, data.resolved);

    const std::string meta_path = csv_path + ".meta.json";
    std::vector<ExperimentRecord> existing;
    if (std::filesystem::exists(csv_path)) {
        std::ifstream meta(meta_path);
        if (!meta)
            throw std::runtime_error("records file exists without sidecar: " + csv_path);
        nlohmann::json j;
        meta >> j;
        if (j.value("digest", "") != out.digest)
            throw std::runtime_error("records file " + csv_path +
                                     " belongs to a different sweep config");
        existing = load_records_csv(csv_path);
    } else {
        std::ofstream csv(csv_path);
        if (!csv) throw std::runtime_error("cannot create " + csv_path);
        csv << kRecordsCsvHeader << '\n';
        nlohmann::json j;
        j["digest"] = out.digest;
        j["resolved"] = data.resolved;
        j["config"] = sweep_to_json(cfg);
        std::ofstream meta(meta_path);
        if (!meta) throw std::runtime_error("cannot create " + meta_path);
        meta << j.dump(2) << '\n';
    }
    for (auto& r : existing) r.digest = out.digest;
    out.records = existing;

    const auto archs = detail::expand_archs(cfg);
    TrainConfig tc;
    tc.max_epochs = cfg.max_epochs;
    tc.batch_size = cfg.batch_size;
    tc.patience = cfg.patience;
    tc.adam.lr = cfg.lr;
    tc.l2_lambda = cfg.l2_lambda;

    std::map<std::string, ModelState<T>> model_cache;
    for (const auto& arch : archs) {
        const ModelConfig mc = detail::arch_model_config(cfg, arch);
        for (const std::uint64_t seed : cfg.seeds) {
            // collect this model's missing cells before deciding to train
            struct Cell {
                std::string kind;
                double severity;
                int index;
            };
            std::vector<Cell> todo;
            int cell_index = 0;
            for (const auto& grid : cfg.corruptions)
                for (double sev : grid.severities) {
                    ExperimentRecord probe;
                    probe.variant = arch.variant;
                    probe.t1 = arch.t1;
                    probe.t2 = arch.t2;
                    probe.kind = grid.kind;
                    probe.severity = sev;
                    probe.seed = seed;
                    const bool done = std::any_of(
                        out.records.begin(), out.records.end(),
                        [&](const ExperimentRecord& r) { return r.same_cell(probe); });
                    if (done)
                        ++out.skipped;
                    else
                        todo.push_back({grid.kind, sev, cell_index});
                    ++cell_index;
                }
            if (todo.empty()) continue;

            const std::string key = arch.model_key() + "#" + std::to_string(seed);
            if (model_cache.find(key) == model_cache.end()) {
                TrainConfig cell_tc = tc;
                cell_tc.seed = seed;
                if (log != nullptr)
                    *log << "training " << arch.variant << "(" << arch.t1 << "," << arch.t2
                         << ") seed " << seed << "\n"
                         << std::flush;
                auto result = train(cell_tc, mc, data.train, data.val);
                if (result.diverged && log != nullptr)
                    *log << "warning: training diverged, keeping last good state\n";
                model_cache.emplace(key, std::move(result.state));
                ++out.trained;
            }
            const ModelState<T>& state = model_cache.at(key);

            for (const Cell& cell : todo) {
                std::optional<CorruptionSpec> spec;
                if (cell.kind != "none" && cell.severity > 0.0) {
                    CorruptionSpec s;
                    s.kind = corruption_from(cell.kind);
                    s.severity = cell.severity;
                    s.patch_count = cfg.patch_count;
                    s.strip_thickness = cfg.strip_thickness;
                    spec = s;
                }
                const std::uint64_t eval_seed =
                    mix_seed(seed, 0xC0DE0000ull + static_cast<std::uint64_t>(cell.index));
                const EvalResult ev = evaluate(mc, state, data.test, spec, eval_seed);

                ExperimentRecord r;
                r.variant = arch.variant;
                r.t1 = arch.t1;
                r.t2 = arch.t2;
                r.kind = cell.kind;
                r.severity = cell.severity;
                r.seed = seed;
                r.accuracy = ev.accuracy;
                r.n = ev.total;
                r.timestamp = detail::timestamp_now();
                r.digest = out.digest;

                std::ofstream csv(csv_path, std::ios::app);
                if (!csv) throw std::runtime_error("cannot append to " + csv_path);
                csv << record_csv_line(r) << '\n';
                if (!csv) throw std::runtime_error("write failed for " + csv_path);
                out.records.push_back(std::move(r));
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// summarize
// ---------------------------------------------------------------------------

struct SummaryRow {
    std::string kind;
    double severity = 0.0;
    std::string base_arch;     // empty when the grid held no base cnn
    double base_mean = 0.0;
    double base_ci = 0.0;
    std::string best_arch;
    int best_t1 = 1, best_t2 = 1;
    double best_mean = 0.0;
    double best_ci = 0.0;
    double diff = 0.0;         // best - base (0 when best is its own base)
    int seed_count = 0;
};

namespace detail {

inline std::string arch_label(const std::string& variant, int t1, int t2) {
    if (variant == "cnn") return "cnn";
    if (variant == "reccnn") return "reccnn(" + std::to_string(t1) + ")";
    return "kercnn(" + std::to_string(t1) + "," + std::to_string(t2) + ")";
}

struct MeanCi {
    double mean = 0.0, ci = 0.0;
    int k = 0;
};

inline MeanCi mean_ci(const std::vector<double>& xs) {
    MeanCi m;
    m.k = static_cast<int>(xs.size());
    for (double x : xs) m.mean += x;
    m.mean /= static_cast<double>(m.k);
    if (m.k > 1) {
        double ss = 0.0;
        for (double x : xs) ss += (x - m.mean) * (x - m.mean);
        const double sd = std::sqrt(ss / static_cast<double>(m.k - 1));
        m.ci = 1.96 * sd / std::sqrt(static_cast<double>(m.k));
    }
    return m;
}

}  // namespace detail

// Per (kind, severity): per-architecture means over seeds, the best mean,
// and the gap to the base cnn. Ties go to the smaller T1 + T2 (then T1).
// Pure in the records: input order never matters.
inline std::vector<SummaryRow> summarize(std::vector<ExperimentRecord> records) {
    if (records.empty()) throw std::invalid_argument("summarize: no records");
    std::sort(records.begin(), records.end(), [](const auto& a, const auto& b) {
        return std::tie(a.kind, a.severity, a.variant, a.t1, a.t2, a.seed) <
               std::tie(b.kind, b.severity, b.variant, b.t1, b.t2, b.seed);
    });

    using CellKey = std::pair<std::string, double>;                    // (kind, severity)
    using ArchKey = std::tuple<std::string, int, int>;                 // (variant, t1, t2)
    std::map<CellKey, std::map<ArchKey, std::vector<double>>> groups;
    for (const auto& r : records)
        groups[{r.kind, r.severity}][{r.variant, r.t1, r.t2}].push_back(r.accuracy);

    std::vector<SummaryRow> out;
    for (const auto& [cell, arch_accs] : groups) {
        SummaryRow row;
        row.kind = cell.first;
        row.severity = cell.second;

        bool have_best = false;
        detail::MeanCi best;
        ArchKey best_key;
        for (const auto& [arch, accs] : arch_accs) {
            const detail::MeanCi m = detail::mean_ci(accs);
            const auto& [variant, t1, t2] = arch;
            const bool better =
                !have_best || m.mean > best.mean + 1e-12 ||
                (std::abs(m.mean - best.mean) <= 1e-12 &&
                 std::make_tuple(t1 + t2, t1, variant) <
                     std::make_tuple(std::get<1>(best_key) + std::get<2>(best_key),
                                     std::get<1>(best_key), std::get<0>(best_key)));
            if (better) {
                have_best = true;
                best = m;
                best_key = arch;
            }
            const bool is_base = variant == "cnn" || (variant == "kercnn" && t1 == 1 && t2 == 1);
            if (is_base && (row.base_arch.empty() || variant == "cnn")) {
                row.base_arch = detail::arch_label(variant, t1, t2);
                row.base_mean = m.mean;
                row.base_ci = m.ci;
            }
        }
        row.best_arch = detail::arch_label(std::get<0>(best_key), std::get<1>(best_key),
                                           std::get<2>(best_key));
        row.best_t1 = std::get<1>(best_key);
        row.best_t2 = std::get<2>(best_key);
        row.best_mean = best.mean;
        row.best_ci = best.ci;
        row.seed_count = best.k;
        if (row.base_arch.empty()) {
            row.base_arch = row.best_arch;
            row.base_mean = best.mean;
            row.base_ci = best.ci;
        }
        row.diff = row.best_mean - row.base_mean;
        out.push_back(std::move(row));
    }
    return out;
}

inline std::string summary_table(const std::vector<SummaryRow>& rows) {
    std::ostringstream os;
    os << std::left << std::setw(9) << "kind" << std::right << std::setw(9) << "severity"
       << std::setw(8) << "seeds" << "  " << std::left << std::setw(13) << "base"
       << std::right << std::setw(8) << "base%" << std::setw(7) << "ci" << "  " << std::left
       << std::setw(13) << "best" << std::right << std::setw(8) << "best%" << std::setw(7)
       << "ci" << std::setw(8) << "diff" << '\n';
    os.setf(std::ios::fixed);
    for (const auto& r : rows) {
        os << std::left << std::setw(9) << r.kind << std::right << std::setw(9)
           << std::setprecision(2) << r.severity << std::setw(8) << r.seed_count << "  "
           << std::left << std::setw(13) << r.base_arch << std::right << std::setw(8)
           << std::setprecision(2) << 100.0 * r.base_mean << std::setw(7)
           << 100.0 * r.base_ci << "  " << std::left << std::setw(13) << r.best_arch
           << std::right << std::setw(8) << 100.0 * r.best_mean << std::setw(7)
           << 100.0 * r.best_ci << std::showpos << std::setw(8) << 100.0 * r.diff
           << std::noshowpos << '\n';
    }
    return os.str();
}

}  // namespace kercnn
