#pragma once

#include "kercnn/sweep.hpp"

#include "CLI11.hpp"

#include <iostream>

namespace kercnn {

// ---------------------------------------------------------------------------
// Command line driver. Subcommands:
//   train      fit one model, save a checkpoint and a training log
//   eval       accuracy of a checkpoint under one corruption spec
//   sweep      run a sweep config file, append records to a CSV
//   summarize  records CSV -> per-severity accuracy table
//   kernel     export lateral kernel montage, propagation fields, raw tensor
//   corrupt    write corrupted copies of an IDX set
//   synth      write a synthetic stroke-digit IDX set
//
// run_cli never throws: errors print a diagnostic on stderr and return
// nonzero. Every source of randomness is pinned by a --seed flag or, for
// sweeps, by the seed list inside the config file.
// ---------------------------------------------------------------------------

namespace cli_detail {

struct DataFlags {
    std::string dataset = "synth";
    std::string data_root;
    int train_subset = 10000;
    int val_count = 1000;
    int test_subset = 2000;
};

inline void add_data_flags(CLI::App* cmd, DataFlags& f) {
    cmd->add_option("--dataset", f.dataset, "mnist | kmnist | fashion | synth")
        ->check(CLI::IsMember({"mnist", "kmnist", "fashion", "synth"}))
        ->capture_default_str();
    cmd->add_option("--data-root", f.data_root, "IDX directory (default $KERCNN_DATA_ROOT)");
    cmd->add_option("--train-subset", f.train_subset, "training samples, 0 = all")
        ->capture_default_str();
    cmd->add_option("--val-count", f.val_count, "held-out validation samples")
        ->capture_default_str();
    cmd->add_option("--test-subset", f.test_subset, "test samples, 0 = all")
        ->capture_default_str();
}

template <typename T>
SweepData<T> resolve_data(const DataFlags& f) {
    SweepConfig c;
    c.dataset = f.dataset;
    c.data_root = f.data_root;
    c.train_subset = f.train_subset;
    c.val_count = f.val_count;
    c.test_subset = f.test_subset;
    return prepare_sweep_data<T>(c, &std::cerr);
}

inline ModelConfig make_model(const std::string& model, int t1, int t2, int steps,
                              double dropout) {
    ModelConfig mc;
    if (model == "cnn")
        mc = ModelConfig::mnist_cnn();
    else if (model == "kercnn")
        mc = ModelConfig::mnist_kercnn(t1, t2);
    else
        mc = ModelConfig::mnist_reccnn(steps);
    mc.recurrent_dropout = dropout;
    return mc;
}

struct CorruptFlags {
    std::string kind = "none";
    double gamma = 15.0;
    int shift = 2;
    double eps = 0.15;
    int patch_count = 4;
    int thickness = 2;
};

inline void add_severity_flags(CLI::App* cmd, CorruptFlags& f) {
    cmd->add_option("--gamma", f.gamma, "patch width in pixels (patches)")
        ->capture_default_str();
    cmd->add_option("--shift", f.shift, "maximum strip displacement D (strips)")
        ->capture_default_str();
    cmd->add_option("--eps", f.eps, "attack step size (fgsm)")->capture_default_str();
    cmd->add_option("--patch-count", f.patch_count, "patches per image")
        ->capture_default_str();
    cmd->add_option("--thickness", f.thickness, "strip thickness in pixels")
        ->capture_default_str();
}

inline std::optional<CorruptionSpec> make_spec(const CorruptFlags& f) {
    if (f.kind == "none") return std::nullopt;
    CorruptionSpec s;
    s.kind = corruption_from(f.kind);
    switch (s.kind) {
        case CorruptionKind::patches: s.severity = f.gamma; break;
        case CorruptionKind::strips: s.severity = static_cast<double>(f.shift); break;
        default: s.severity = f.eps; break;
    }
    s.patch_count = f.patch_count;
    s.strip_thickness = f.thickness;
    s.validate();
    return s;
}

// k.png -> k-prop.png
inline std::string with_tag(const std::string& path, const std::string& tag) {
    std::filesystem::path p(path);
    const std::string ext = p.extension().string();
    p.replace_extension();
    return p.string() + tag + ext;
}

template <typename T>
void write_gray(const std::string& path, const Tensor<T>& img) {
    if (path.size() >= 4 && path.compare(path.size() - 4, 4, ".pgm") == 0)
        write_pgm(path, img);
    else
        write_png(path, img);
}

// ---------------------------------------------------------------------------
// Subcommand bodies
// ---------------------------------------------------------------------------

struct TrainFlags {
    DataFlags data;
    std::string model = "cnn";
    int t1 = 3, t2 = 2, steps = 3;
    double dropout = 0.2;
    int epochs = 15, batch = 50, patience = 10;
    double lr = 0.001, l2 = 0.0005;
    std::uint64_t seed = 1;
    std::string out = "model.ckpt", log_path;
};

template <typename T>
int cmd_train(const TrainFlags& f) {
    const ModelConfig mc = make_model(f.model, f.t1, f.t2, f.steps, f.dropout);
    const SweepData<T> data = resolve_data<T>(f.data);
    TrainConfig tc;
    tc.max_epochs = f.epochs;
    tc.batch_size = f.batch;
    tc.patience = f.patience;
    tc.adam.lr = f.lr;
    tc.l2_lambda = f.l2;
    tc.seed = f.seed;
    std::cerr << "training " << f.model << " on " << data.resolved << " (" << data.train.n()
              << " train / " << data.val.n() << " val)\n";
    const TrainResult<T> r = train(tc, mc, data.train, data.val);
    if (r.diverged) std::cerr << "warning: training diverged, keeping the last finite state\n";
    save_checkpoint(f.out, mc, r.state);
    if (!f.log_path.empty()) {
        std::ofstream os(f.log_path);
        if (!os) throw std::runtime_error("cannot open " + f.log_path);
        os << train_log_csv(r.log);
    }
    const EvalResult ev = evaluate(mc, r.state, data.test);
    std::cout << "parameters    " << r.state.param_count() << "\n";
    if (r.best_epoch > 0)
        std::cout << "best epoch    " << r.best_epoch << " (val accuracy " << std::fixed
                  << std::setprecision(4) << r.best_val_acc << ")\n";
    std::cout << "test accuracy " << std::fixed << std::setprecision(4) << ev.accuracy
              << "\ncheckpoint    " << f.out << "\n";
    return 0;
}

struct EvalFlags {
    DataFlags data;
    std::string ckpt;
    CorruptFlags cor;
    std::uint64_t seed = 0;
    bool confusion = false;
};

template <typename T>
int cmd_eval(const EvalFlags& f) {
    const auto [mc, state] = load_checkpoint<T>(f.ckpt);
    const SweepData<T> data = resolve_data<T>(f.data);
    const std::optional<CorruptionSpec> spec = make_spec(f.cor);
    const EvalResult ev = evaluate(mc, state, data.test, spec, f.seed);
    std::cout << "accuracy " << std::fixed << std::setprecision(6) << ev.accuracy << " ("
              << ev.correct << "/" << ev.total << ")";
    if (spec)
        std::cout << " under " << f.cor.kind << " severity " << std::defaultfloat
                  << spec->severity;
    std::cout << "\n";
    if (f.confusion) {
        std::cout << "confusion (rows true, cols predicted):\n";
        for (int a = 0; a < mc.class_count; ++a) {
            for (int b = 0; b < mc.class_count; ++b)
                std::cout << std::setw(6)
                          << ev.confusion[static_cast<std::size_t>(a) *
                                              static_cast<std::size_t>(mc.class_count) +
                                          static_cast<std::size_t>(b)];
            std::cout << "\n";
        }
    }
    return 0;
}

template <typename T>
int cmd_sweep(const std::string& config_path, const std::string& out_path) {
    const SweepConfig cfg = load_sweep_config(config_path);
    const SweepOutput res = run_sweep<T>(cfg, out_path, &std::cerr);
    std::cout << "digest  " << res.digest << "\ntrained " << res.trained
              << " models, skipped " << res.skipped << " finished cells\nrecords "
              << res.records.size() << " in " << out_path << "\n\n"
              << summary_table(summarize(res.records));
    return 0;
}

inline int cmd_summarize(const std::string& records_path) {
    std::cout << summary_table(summarize(load_records_csv(records_path)));
    return 0;
}

struct KernelFlags {
    std::string ckpt, out = "kernel.png";
    int layer = 1, steps = 0, feature = 0, field_size = 25;
};

// Always double: the checkpoint stores f64 filters, and the unit-mass gate
// below is tighter than float accumulation noise over S*S*F terms.
inline int cmd_kernel(const KernelFlags& f) {
    using T = double;
    const auto [mc, state] = load_checkpoint<T>(f.ckpt);
    const int layer_count = static_cast<int>(mc.layers.size());
    if (f.layer < 1 || f.layer > layer_count)
        throw std::invalid_argument("kernel: --layer must be in 1.." +
                                    std::to_string(layer_count));
    const Tensor<T> kern =
        build_lateral_kernel(state.conv_w[static_cast<std::size_t>(f.layer - 1)], f.layer - 1)
            .values;

    const Tensor<T> masses = kernel_row_masses(kern);
    double worst = 0.0;
    for (int i = 0; i < masses.dim(0); ++i)
        worst = std::max(worst, std::abs(static_cast<double>(masses(i)) - 1.0));
    if (worst > 1e-6) {
        std::cerr << "error: kernel mass deviates from 1 by " << worst
                  << "; refusing to export\n";
        return 1;
    }

    write_gray(f.out, kernel_montage(kern));
    const std::string binary =
        std::filesystem::path(f.out).replace_extension(".klat").string();
    write_kernel_binary(binary, kern);
    std::cout << "layer " << f.layer << " kernel " << kern.dim(0) << "x" << kern.dim(1) << "x"
              << kern.dim(2) << "x" << kern.dim(3) << ", max |mass - 1| = " << std::scientific
              << std::setprecision(2) << worst << "\nmontage " << f.out << "\ntensor  "
              << binary << "\n";
    if (f.steps > 0) {
        if (f.feature < 0 || f.feature >= kern.dim(2))
            throw std::invalid_argument("kernel: --feature out of range");
        const auto fields =
            propagate_kernel(kern, f.feature, f.steps, f.field_size, f.field_size);
        const std::string prop = with_tag(f.out, "-prop");
        write_gray(prop, fields_montage(fields));
        std::cout << "fields  " << prop << " (" << f.steps << " steps, feature " << f.feature
                  << ")\n";
    }
    return 0;
}

struct CorruptCmdFlags {
    std::string images, labels, out_images, out_labels, ckpt;
    CorruptFlags cor;
    std::uint64_t seed = 0;
    int subset = 0;
};

template <typename T>
int cmd_corrupt(const CorruptCmdFlags& f) {
    Dataset<T> ds = load_idx<T>(f.images, f.labels);
    if (f.subset > 0 && f.subset < ds.n()) ds = shuffled_subset(ds, f.subset, f.seed);
    std::optional<CorruptionSpec> spec = make_spec(f.cor);
    spec->rng_seed = f.seed;
    if (spec->kind == CorruptionKind::fgsm) {
        // the attack runs in the model's z-scored space, the IDX output in [0, 1]
        if (f.ckpt.empty()) throw std::invalid_argument("corrupt: fgsm needs --ckpt");
        const auto [mc, state] = load_checkpoint<T>(f.ckpt);
        const ZScoreStats st = zscore_fit(ds);
        Dataset<T> z = ds;
        zscore_apply(z, st);
        for (int i = 0; i < z.n(); ++i) {
            const Tensor<T> adv = corrupt_image(z.image(i), z.labels[static_cast<std::size_t>(i)],
                                                *spec, static_cast<std::uint64_t>(i), &mc,
                                                &state);
            ds.set_image(i, denormalize_image(adv, st));
        }
    } else {
        for (int i = 0; i < ds.n(); ++i)
            ds.set_image(i, corrupt_image(ds.image(i), ds.labels[static_cast<std::size_t>(i)],
                                          *spec, static_cast<std::uint64_t>(i)));
    }
    write_idx(f.out_images, f.out_labels, ds);
    std::cout << "wrote " << ds.n() << " " << f.cor.kind << "-corrupted images to "
              << f.out_images << "\n";
    return 0;
}

inline int cmd_synth(const std::string& images, const std::string& labels, int count,
                     std::uint64_t seed) {
    write_idx(images, labels, make_synth_dataset<float>(count, seed));
    std::cout << "wrote " << count << " synthetic digits to " << images << "\n";
    return 0;
}

}  // namespace cli_detail

inline int run_cli(int argc, const char* const* argv) {
    using namespace cli_detail;
    CLI::App app{"small-CNN laboratory with filter-derived lateral kernels"};
    app.require_subcommand(1);
    std::string precision = "float";
    const auto add_precision = [&precision](CLI::App* cmd) {
        cmd->add_option("--precision", precision, "float | double")
            ->check(CLI::IsMember({"float", "double"}))
            ->capture_default_str();
    };

    TrainFlags tf;
    CLI::App* ct = app.add_subcommand("train", "fit one model and save a checkpoint");
    ct->add_option("--model", tf.model, "cnn | kercnn | reccnn")
        ->check(CLI::IsMember({"cnn", "kercnn", "reccnn"}))
        ->capture_default_str();
    ct->add_option("--t1", tf.t1, "layer-1 stopping time (kercnn)")->capture_default_str();
    ct->add_option("--t2", tf.t2, "layer-2 stopping time (kercnn)")->capture_default_str();
    ct->add_option("--steps", tf.steps, "recurrent time steps (reccnn)")
        ->capture_default_str();
    ct->add_option("--dropout", tf.dropout, "recurrent dropout probability")
        ->capture_default_str();
    ct->add_option("--epochs", tf.epochs)->capture_default_str();
    ct->add_option("--batch", tf.batch)->capture_default_str();
    ct->add_option("--patience", tf.patience, "early-stop patience in epochs")
        ->capture_default_str();
    ct->add_option("--lr", tf.lr)->capture_default_str();
    ct->add_option("--l2", tf.l2, "weight decay coefficient")->capture_default_str();
    ct->add_option("--seed", tf.seed)->capture_default_str();
    ct->add_option("--out", tf.out, "checkpoint path")->capture_default_str();
    ct->add_option("--log", tf.log_path, "training log CSV path");
    add_data_flags(ct, tf.data);
    add_precision(ct);

    EvalFlags ef;
    CLI::App* ce = app.add_subcommand("eval", "evaluate a checkpoint under a corruption");
    ce->add_option("--ckpt", ef.ckpt, "checkpoint path")->required();
    ce->add_option("--corrupt", ef.cor.kind, "none | patches | strips | fgsm")
        ->check(CLI::IsMember({"none", "patches", "strips", "fgsm"}))
        ->capture_default_str();
    add_severity_flags(ce, ef.cor);
    ce->add_option("--seed", ef.seed, "corruption base seed")->capture_default_str();
    ce->add_flag("--confusion", ef.confusion, "print the confusion matrix");
    add_data_flags(ce, ef.data);
    add_precision(ce);

    std::string sweep_config, sweep_out = "results.csv";
    CLI::App* cs = app.add_subcommand("sweep", "run a sweep config, append records to a CSV");
    cs->add_option("--config", sweep_config, "sweep config JSON")->required();
    cs->add_option("--out", sweep_out, "records CSV path")->capture_default_str();
    add_precision(cs);

    std::string records_path = "results.csv";
    CLI::App* cm = app.add_subcommand("summarize", "records CSV -> accuracy table");
    cm->add_option("--records", records_path, "records CSV path")->capture_default_str();

    KernelFlags kf;
    CLI::App* ck = app.add_subcommand("kernel", "export lateral kernels of a checkpoint");
    ck->add_option("--ckpt", kf.ckpt, "checkpoint path")->required();
    ck->add_option("--layer", kf.layer, "1-based source layer")->capture_default_str();
    ck->add_option("--steps", kf.steps, "also export n propagation steps")
        ->capture_default_str();
    ck->add_option("--feature", kf.feature, "impulse feature for propagation")
        ->capture_default_str();
    ck->add_option("--field-size", kf.field_size, "propagation grid side length")
        ->capture_default_str();
    ck->add_option("--out", kf.out, "montage path (.png or .pgm)")->capture_default_str();

    CorruptCmdFlags cf;
    CLI::App* cc = app.add_subcommand("corrupt", "write corrupted copies of an IDX set");
    cc->add_option("--images", cf.images, "input IDX images")->required();
    cc->add_option("--labels", cf.labels, "input IDX labels")->required();
    cc->add_option("--out-images", cf.out_images)->required();
    cc->add_option("--out-labels", cf.out_labels)->required();
    cc->add_option("--kind", cf.cor.kind, "patches | strips | fgsm")
        ->check(CLI::IsMember({"patches", "strips", "fgsm"}))
        ->required();
    add_severity_flags(cc, cf.cor);
    cc->add_option("--ckpt", cf.ckpt, "checkpoint (fgsm only)");
    cc->add_option("--seed", cf.seed)->capture_default_str();
    cc->add_option("--subset", cf.subset, "corrupt a random subset, 0 = all")
        ->capture_default_str();
    add_precision(cc);

    std::string synth_images, synth_labels;
    int synth_count = 1000;
    std::uint64_t synth_seed = 1;
    CLI::App* cy = app.add_subcommand("synth", "write a synthetic stroke-digit IDX set");
    cy->add_option("--images", synth_images, "output IDX images")->required();
    cy->add_option("--labels", synth_labels, "output IDX labels")->required();
    cy->add_option("--count", synth_count)->capture_default_str();
    cy->add_option("--seed", synth_seed)->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        const bool dbl = precision == "double";
        if (ct->parsed()) return dbl ? cmd_train<double>(tf) : cmd_train<float>(tf);
        if (ce->parsed()) return dbl ? cmd_eval<double>(ef) : cmd_eval<float>(ef);
        if (cs->parsed())
            return dbl ? cmd_sweep<double>(sweep_config, sweep_out)
                       : cmd_sweep<float>(sweep_config, sweep_out);
        if (cm->parsed()) return cmd_summarize(records_path);
        if (ck->parsed()) return cmd_kernel(kf);
        if (cc->parsed()) return dbl ? cmd_corrupt<double>(cf) : cmd_corrupt<float>(cf);
        if (cy->parsed()) return cmd_synth(synth_images, synth_labels, synth_count, synth_seed);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

inline int run_cli(const std::vector<std::string>& args) {
    std::vector<std::string> store;
    store.reserve(args.size() + 1);
    store.emplace_back("kercnn");
    store.insert(store.end(), args.begin(), args.end());
    std::vector<const char*> argv;
    argv.reserve(store.size());
    for (const auto& s : store) argv.push_back(s.c_str());
    return run_cli(static_cast<int>(argv.size()), argv.data());
}

}  // namespace kercnn
