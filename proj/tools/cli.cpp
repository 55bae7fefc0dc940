#include "cli.hpp"

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "smeood/smeood.hpp"

namespace smeood::cli {
namespace {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

/// Bad flag values that CLI11 cannot check on its own.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

ScoreMethod method_flag(const std::string& flag, const std::string& value) {
    try {
        return parse_method(value);
    } catch (const InvalidArgument& e) {
        throw UsageError(flag + ": " + e.what());
    }
}

std::vector<ScoreMethod> methods_flag(const std::string& flag, const std::string& value) {
    try {
        return parse_method_list(value);
    } catch (const InvalidArgument& e) {
        throw UsageError(flag + ": " + e.what());
    }
}

ScoreKind kind_flag(const std::string& flag, const std::string& value) {
    auto k = parse_score_kind(value);
    if (!k) throw UsageError(flag + ": unknown score method '" + value + "'");
    return *k;
}

std::vector<double> grid_flag(const std::string& flag, const std::string& value) {
    std::vector<double> out;
    std::stringstream ss(value);
    std::string item;
    while (std::getline(ss, item, ',')) {
        auto v = parse_double(item);
        if (!v || !(*v > 0.0) || !std::isfinite(*v))
            throw UsageError(flag + ": '" + item + "' is not a positive number");
        out.push_back(*v);
    }
    if (out.empty()) throw UsageError(flag + ": empty list");
    return out;
}

Split split_flag(const std::string& flag, const std::string& value) {
    auto s = parse_split(value);
    if (!s) throw UsageError(flag + ": unknown split '" + value + "'");
    return *s;
}

nlohmann::json read_json_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError(path.string(), 0, "cannot open file");
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string(), 0, e.what());
    }
}

void write_json_file(const fs::path& path, const ojson& j) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

std::ofstream open_out(const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path.string());
    return out;
}

Dataset load_logits(const fs::path& path, const std::string& classes) {
    std::vector<std::string> names;
    ValidateOptions opts;
    if (!classes.empty()) names = read_class_names(classes);
    else opts.require_known_classes = false;
    return load_dataset(path, format_from_extension(path), std::move(names), opts);
}

std::string fmt(double v) { return format_double(v); }

// ---------------------------------------------------------------------------

struct GenArgs {
    std::string spec, out;
    std::optional<std::uint64_t> seed;
};

int cmd_gen(const GenArgs& a, std::ostream& out) {
    SynthSpec spec;
    if (!a.spec.empty()) {
        try {
            spec = read_json_file(a.spec).get<SynthSpec>();
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(a.spec, 0, e.what());
        }
    }
    if (a.seed) spec.seed = *a.seed;
    const auto data = generate(spec);
    save_synth(a.out, data);
    out << "generated " << data.meta.records.size() << " samples (" << data.aux_meta.records.size()
        << " auxiliary OOD) in " << a.out << '\n';
    return kOk;
}

struct TrainArgs {
    std::string data, config, out;
    std::optional<std::uint64_t> seed;
};

int cmd_train(const TrainArgs& a, std::ostream& out) {
    TrainConfig cfg;
    bool auto_sme = false;
    if (!a.config.empty()) {
        auto j = read_json_file(a.config);
        if (j.contains("sme_loss") && j["sme_loss"].is_string()) {
            if (j["sme_loss"] != "auto")
                throw FormatError(a.config, 0, "sme_loss must be an object, null or \"auto\"");
            auto_sme = true;
            j.erase("sme_loss");
        }
        try {
            cfg = j.get<TrainConfig>();
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(a.config, 0, e.what());
        }
    }
    if (a.seed) cfg.seed = *a.seed;
    cfg.validate();

    const auto data = load_synth(a.data);
    if (auto_sme) {
        TrainConfig base_cfg = cfg;
        base_cfg.sme_loss.reset();
        const auto baseline = train(data, base_cfg);
        cfg.sme_loss = select_sme_hyperparameters(baseline.model, data, cfg);
        out << "sme_loss: lambda=" << fmt(cfg.sme_loss->lambda) << " m_in=" << fmt(cfg.sme_loss->m_in)
            << " m_out=" << fmt(cfg.sme_loss->m_out) << '\n';
    }
    const auto result = train(data, cfg);

    const fs::path dir = a.out;
    fs::create_directories(dir);
    save_model(dir / "model.bin", result.model);
    {
        auto log = open_out(dir / "trainlog.jsonl");
        write_train_log(log, result.log);
    }
    write_json_file(dir / "config.json", ojson(nlohmann::json(cfg)));
    write_class_names(dir / "classes.txt", data.meta.class_names);
    save_dataset(dir / "dev_logits.csv", infer_logits(result.model, data, Split::dev), DataFormat::csv);
    save_dataset(dir / "eval_logits.csv", infer_logits(result.model, data, Split::eval), DataFormat::csv);

    const auto& sel = result.log.epochs.at(static_cast<std::size_t>(result.log.selected_epoch));
    out << "trained " << result.log.epochs.size() << " epochs; selected epoch " << sel.epoch
        << " (dev eerc " << fmt(sel.dev_eerc) << ", dev fpr95 " << fmt(sel.dev_fpr95) << ")\n";
    return kOk;
}

struct ScoreArgs {
    std::string logits, classes, method = "sme:1", out;
};

int cmd_score(const ScoreArgs& a, std::ostream& out) {
    const auto m = method_flag("--method", a.method);
    const auto d = load_logits(a.logits, a.classes);
    const auto w = compute_class_weights(d.records);
    const auto scored = score_dataset(d.records, m, w, d.class_names);
    auto f = open_out(a.out);
    write_scored_csv(f, scored);
    out << "scored " << scored.size() << " samples with " << format_method(m) << '\n';
    return kOk;
}

struct SourceArgs {
    std::string model, data, logits, classes;
    std::string split;
};

/// Logits either from a model applied to a synthbench directory, or from a file.
Dataset resolve_logits(const SourceArgs& a, Split default_split) {
    if (!a.logits.empty()) {
        Dataset d = load_logits(a.logits, a.classes);
        if (a.split.empty()) return d;
        const Split s = split_flag("--split", a.split);
        Dataset sub;
        sub.class_names = d.class_names;
        for (auto& r : d.records)
            if (r.split == s) sub.records.push_back(std::move(r));
        return sub;
    }
    if (a.model.empty() || a.data.empty())
        throw UsageError("either --logits or both --model and --data are required");
    const Split s = a.split.empty() ? default_split : split_flag("--split", a.split);
    const auto model = load_model(a.model);
    const auto data = load_synth(a.data);
    if (model.input_dim() != data.features.cols() ||
        static_cast<std::size_t>(model.num_classes()) != data.meta.class_names.size())
        throw InvalidArgument("model " + a.model + " does not match data in " + a.data);
    return infer_logits(model, data, s);
}

struct EvalArgs {
    SourceArgs src;
    std::string methods = "msp,energy:1,energy:0.0625,sme:1", out;
    bool emit_sweep = false;
};

int cmd_eval(const EvalArgs& a, std::ostream& out) {
    const auto methods = methods_flag("--methods", a.methods);
    if (!a.src.logits.empty() && a.src.classes.empty())
        throw UsageError("--logits needs --classes so ID samples resolve to a true class");
    const Dataset logits = resolve_logits(a.src, Split::eval);
    if (logits.records.empty()) throw InvalidArgument("no samples to evaluate");
    ojson j;
    if (!a.src.split.empty()) j["split"] = a.src.split;
    else if (a.src.logits.empty()) j["split"] = "eval";
    auto& reports = j["reports"] = ojson::array();
    out << "method          id_acc    fpr95     eer       eerc\n";
    for (const auto& m : methods) {
        const auto r = report_for(logits, m, a.emit_sweep);
        reports.push_back(to_json(r));
        char line[128];
        std::snprintf(line, sizeof line, "%-15s %-9.4f %-9.4f %-9.4f %.4f\n",
                      format_method(m).c_str(), r.id_acc, r.fpr95, r.eer, r.eerc);
        out << line;
    }
    write_json_file(a.out, j);
    return kOk;
}

struct SweepArgs {
    SourceArgs src;
    std::string method = "energy", grid = "0.015625,0.03125,0.0625,0.125,0.25,0.5,1,2,4", out;
};

int cmd_sweep(const SweepArgs& a, std::ostream& out) {
    const ScoreKind kind = kind_flag("--method", a.method);
    const auto grid = grid_flag("--sweep-grid", a.grid);
    const Dataset dev = resolve_logits(a.src, Split::dev);
    const auto s = sweep_temperature(dev, kind, grid);
    ojson j;
    j["method"] = std::string(to_string(kind));
    j["best_temperature"] = s.best_temperature;
    auto& rows = j["table"] = ojson::array();
    for (const auto& r : s.table) {
        rows.push_back({{"temperature", r.temperature}, {"dev_eerc", r.dev_eerc}, {"dev_fpr95", r.dev_fpr95}});
        out << "T=" << fmt(r.temperature) << " dev_eerc=" << fmt(r.dev_eerc)
            << " dev_fpr95=" << fmt(r.dev_fpr95) << '\n';
    }
    out << "best T=" << fmt(s.best_temperature) << '\n';
    write_json_file(a.out, j);
    return kOk;
}

struct ProfileArgs {
    SourceArgs src;
    int top = 10;
    std::string out;
};

int cmd_profile(const ProfileArgs& a, std::ostream& out) {
    if (a.top < 1) throw UsageError("--top must be positive");
    const Dataset d = resolve_logits(a.src, Split::dev);
    const auto w = compute_class_weights(d.records);
    const auto p = top_k_logit_profile(d.records, static_cast<std::size_t>(a.top), w);
    ojson j;
    j["top"] = a.top;
    j["id"] = p.id ? ojson(*p.id) : ojson(nullptr);
    j["ood"] = p.ood ? ojson(*p.ood) : ojson(nullptr);
    auto print = [&](const char* name, const std::optional<std::vector<double>>& v) {
        out << name << ':';
        if (!v) out << " (none)";
        else
            for (double x : *v) out << ' ' << fmt(x);
        out << '\n';
    };
    print("id", p.id);
    print("ood", p.ood);
    write_json_file(a.out, j);
    return kOk;
}

struct GradcheckArgs {
    int trials = 100;
    std::uint64_t seed = 1;
    std::string fault, out;
};

int cmd_gradcheck(const GradcheckArgs& a, std::ostream& out, std::ostream& err) {
    if (a.trials < 1) throw UsageError("--trials must be positive");
    GradFault fault = GradFault::none;
    if (a.fault == "ce_loss") fault = GradFault::ce_loss;
    else if (a.fault == "lmcl_loss") fault = GradFault::lmcl_loss;
    else if (a.fault == "sme_hinge_loss") fault = GradFault::sme_hinge_loss;
    else if (a.fault == "combined_objective") fault = GradFault::combined_objective;
    else if (!a.fault.empty()) throw UsageError("--inject-fault: unknown loss '" + a.fault + "'");

    const auto report = run_gradient_suite(a.trials, a.seed, fault);
    ojson j;
    j["trials"] = a.trials;
    j["seed"] = a.seed;
    auto& entries = j["losses"] = ojson::array();
    for (const auto& e : report.entries) {
        out << e.loss << ": max relative error " << fmt(e.max_rel_error) << ", max absolute error "
            << fmt(e.max_abs_error) << " over " << e.trials
            << " instances" << (e.failed_trial ? "  FAIL" : "") << '\n';
        ojson row{{"loss", e.loss}, {"trials", e.trials}, {"max_rel_error", e.max_rel_error},
                  {"max_abs_error", e.max_abs_error},
                  {"passed", !e.failed_trial}};
        entries.push_back(row);
    }
    if (!a.out.empty()) write_json_file(a.out, j);
    for (const auto& e : report.entries)
        if (e.failed_trial) {
            err << "gradcheck failed: loss " << e.loss << ", instance " << *e.failed_trial
                << ", relative error " << fmt(e.failed_error) << '\n';
            return kDataError;
        }
    return kOk;
}

void add_source_flags(CLI::App* sub, SourceArgs& s) {
    sub->add_option("--model", s.model, "Trained model file")->check(CLI::ExistingFile);
    sub->add_option("--data", s.data, "Synthbench directory")->check(CLI::ExistingDirectory);
    sub->add_option("--logits", s.logits, "Logit file (.csv or .jsonl)")->check(CLI::ExistingFile);
    sub->add_option("--classes", s.classes, "Class-name file, one per line")->check(CLI::ExistingFile);
    sub->add_option("--split", s.split, "Split to use (train, dev, eval)");
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Softmax-energy OOD detection toolkit"};
    app.require_subcommand(1);
    std::optional<std::uint64_t> seed;

    GenArgs gen;
    auto* gen_cmd = app.add_subcommand("gen", "Generate a synthbench dataset");
    gen_cmd->add_option("--spec", gen.spec, "SynthSpec JSON")->check(CLI::ExistingFile);
    gen_cmd->add_option("--out", gen.out, "Output directory")->required();
    gen_cmd->add_option("--seed", seed, "Overrides the spec seed");

    TrainArgs tr;
    auto* train_cmd = app.add_subcommand("train", "Train the toy model");
    train_cmd->add_option("--data", tr.data, "Synthbench directory")->required()->check(CLI::ExistingDirectory);
    train_cmd->add_option("--config", tr.config, "TrainConfig JSON")->check(CLI::ExistingFile);
    train_cmd->add_option("--out", tr.out, "Run directory")->required();
    train_cmd->add_option("--seed", seed, "Overrides the config seed");

    ScoreArgs sc;
    auto* score_cmd = app.add_subcommand("score", "Score a logit file");
    score_cmd->add_option("--logits", sc.logits, "Logit file (.csv or .jsonl)")->required()->check(CLI::ExistingFile);
    score_cmd->add_option("--classes", sc.classes, "Class-name file")->check(CLI::ExistingFile);
    score_cmd->add_option("--method", sc.method, "Score method name[:T]")->capture_default_str();
    score_cmd->add_option("--out", sc.out, "Scored CSV")->required();

    EvalArgs ev;
    auto* eval_cmd = app.add_subcommand("eval", "Class-weighted OOD metrics");
    add_source_flags(eval_cmd, ev.src);
    eval_cmd->add_option("--methods", ev.methods, "Comma list of name[:T]")->capture_default_str();
    eval_cmd->add_flag("--emit-sweep-table", ev.emit_sweep, "Include threshold sweep rows");
    eval_cmd->add_option("--out", ev.out, "Report JSON")->required();

    SweepArgs sw;
    auto* sweep_cmd = app.add_subcommand("sweep", "Dev temperature sweep");
    add_source_flags(sweep_cmd, sw.src);
    sweep_cmd->add_option("--method", sw.method, "msp, energy or sme")->capture_default_str();
    sweep_cmd->add_option("--sweep-grid", sw.grid, "Comma list of temperatures")->capture_default_str();
    sweep_cmd->add_option("--out", sw.out, "Sweep JSON")->required();

    ProfileArgs pr;
    auto* profile_cmd = app.add_subcommand("profile", "Mean top-k logits for ID and OOD");
    add_source_flags(profile_cmd, pr.src);
    profile_cmd->add_option("--top", pr.top, "Number of ranked logits")->capture_default_str();
    profile_cmd->add_option("--out", pr.out, "Profile JSON")->required();

    GradcheckArgs gc;
    auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
    gc_cmd->add_option("--trials", gc.trials, "Instances per loss")->capture_default_str();
    gc_cmd->add_option("--seed", gc.seed, "Suite seed")->capture_default_str();
    gc_cmd->add_option("--out", gc.out, "Optional JSON summary");
    gc_cmd->add_option("--inject-fault", gc.fault)->group("");

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << '\n';
        return kUsageError;
    }

    try {
        gen.seed = seed;
        tr.seed = seed;
        if (*gen_cmd) return cmd_gen(gen, out);
        if (*train_cmd) return cmd_train(tr, out);
        if (*score_cmd) return cmd_score(sc, out);
        if (*eval_cmd) return cmd_eval(ev, out);
        if (*sweep_cmd) return cmd_sweep(sw, out);
        if (*profile_cmd) return cmd_profile(pr, out);
        if (*gc_cmd) return cmd_gradcheck(gc, out, err);
    } catch (const UsageError& e) {
        err << "error: " << e.what() << '\n';
        return kUsageError;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kDataError;
    }
    return kUsageError;
}

int run(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return run(args, std::cout, std::cerr);
}

}  // namespace smeood::cli
