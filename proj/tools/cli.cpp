#include "cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "protoscope/embedstore.hpp"
#include "protoscope/error.hpp"
#include "protoscope/evaluator.hpp"
#include "protoscope/explain.hpp"
#include "protoscope/initkit.hpp"
#include "protoscope/synthlab.hpp"
#include "protoscope/trainer.hpp"

namespace protoscope::cli {

namespace fs = std::filesystem;

namespace {

class UsageError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "usage"; }
};

constexpr std::size_t kDefaultSteps = 10000;

/// Resolved settings: command-line flags, then the --config file, then
/// built-in defaults.
class Settings {
public:
    void set_flag(const std::string& key, const std::string& value) { flags_[key] = value; }

    void load_file(const fs::path& path, const std::vector<std::string>& known) {
        std::ifstream in(path);
        if (!in) throw UsageError("cannot open config file " + path.string());
        std::string line;
        std::size_t line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            const auto first = line.find_first_not_of(" \t\r");
            if (first == std::string::npos) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos) {
                throw UsageError(path.string() + ":" + std::to_string(line_no) + ": expected key=value");
            }
            std::string key = trim(line.substr(0, eq));
            std::replace(key.begin(), key.end(), '_', '-');
            if (std::find(known.begin(), known.end(), key) == known.end()) {
                throw UsageError(path.string() + ":" + std::to_string(line_no) + ": unknown key '" +
                                 key + "'");
            }
            file_[key] = trim(line.substr(eq + 1));
        }
    }

    std::optional<std::string> find(const std::string& key) const {
        if (auto it = flags_.find(key); it != flags_.end()) return it->second;
        if (auto it = file_.find(key); it != file_.end()) return it->second;
        return std::nullopt;
    }

    std::string require(const std::string& key) const {
        auto v = find(key);
        if (!v || v->empty()) throw UsageError("missing required option --" + key);
        resolved_[key] = *v;
        return *v;
    }

    std::string text(const std::string& key, const std::string& fallback) const {
        const auto v = find(key).value_or(fallback);
        resolved_[key] = v;
        return v;
    }

    double real(const std::string& key, double fallback) const {
        const auto v = find(key);
        if (!v) {
            resolved_[key] = format(fallback);
            return fallback;
        }
        try {
            std::size_t pos = 0;
            const double x = std::stod(*v, &pos);
            if (pos != v->size()) throw std::invalid_argument(*v);
            resolved_[key] = *v;
            return x;
        } catch (const std::exception&) {
            throw UsageError("option --" + key + " expects a number, got '" + *v + "'");
        }
    }

    std::uint64_t count(const std::string& key, std::uint64_t fallback) const {
        const auto v = find(key);
        if (!v) {
            resolved_[key] = std::to_string(fallback);
            return fallback;
        }
        try {
            std::size_t pos = 0;
            if (!v->empty() && (*v)[0] == '-') throw std::invalid_argument(*v);
            const auto x = std::stoull(*v, &pos);
            if (pos != v->size()) throw std::invalid_argument(*v);
            resolved_[key] = *v;
            return x;
        } catch (const std::exception&) {
            throw UsageError("option --" + key + " expects a non-negative integer, got '" + *v + "'");
        }
    }

    /// Seed: flag, config file, PROTOSCOPE_SEED, then 0.
    std::uint64_t seed() const {
        if (!find("seed")) {
            if (const char* env = std::getenv("PROTOSCOPE_SEED"); env && *env) {
                Settings tmp;
                tmp.set_flag("seed", env);
                const auto s = tmp.count("seed", 0);
                resolved_["seed"] = std::to_string(s);
                return s;
            }
        }
        return count("seed", 0);
    }

    /// Every value read so far, as key=value lines.
    void echo(const fs::path& path) const {
        std::ofstream out(path, std::ios::trunc);
        if (!out) throw IoError("cannot write " + path.string());
        for (const auto& [k, v] : resolved_) out << k << '=' << v << '\n';
    }

private:
    static std::string trim(const std::string& s) {
        const auto a = s.find_first_not_of(" \t\r");
        if (a == std::string::npos) return {};
        const auto b = s.find_last_not_of(" \t\r");
        return s.substr(a, b - a + 1);
    }
    static std::string format(double x) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.17g", x);
        return buf;
    }

    std::map<std::string, std::string> flags_;
    std::map<std::string, std::string> file_;
    mutable std::map<std::string, std::string> resolved_;
};

struct Command {
    CLI::App* app = nullptr;
    std::vector<std::string> keys;
    std::map<std::string, std::string> storage;
    std::string config_path;
};

void add_options(Command& cmd, const std::vector<std::pair<std::string, std::string>>& opts) {
    for (const auto& [key, help] : opts) {
        cmd.keys.push_back(key);
        cmd.app->add_option("--" + key, cmd.storage[key], help);
    }
    cmd.app->add_option("--config", cmd.config_path, "key=value file; flags take precedence");
}

Settings resolve(const Command& cmd) {
    Settings s;
    for (const auto& key : cmd.keys) {
        if (cmd.app->get_option("--" + key)->count() > 0) s.set_flag(key, cmd.storage.at(key));
    }
    if (!cmd.config_path.empty()) s.load_file(cmd.config_path, cmd.keys);
    return s;
}

fs::path prepare_out(const Settings& s) {
    const fs::path out = s.require("out");
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec) throw IoError("cannot create " + out.string() + ": " + ec.message());
    return out;
}

Split split_of(const Settings& s, const char* fallback) {
    try {
        return parse_split(s.text("split", fallback));
    } catch (const ValidationError& e) {
        throw UsageError(e.what());
    }
}

TrainConfig train_config(const Settings& s) {
    TrainConfig c;
    c.lambda = s.real("lambda", c.lambda);
    c.batch_size = s.count("batch-size", c.batch_size);
    c.total_steps = s.count("steps", kDefaultSteps);
    c.peak_lr = s.real("peak-lr", c.peak_lr);
    c.weight_decay = s.real("weight-decay", c.weight_decay);
    c.validate_every = s.count("validate-every", c.validate_every);
    c.prototypes_per_class = s.count("prototypes-per-class", c.prototypes_per_class);
    c.seed = s.seed();
    const std::string target = s.text("prototype-loss", "adapted");
    if (target != "adapted" && target != "raw") {
        throw UsageError("option --prototype-loss expects 'adapted' or 'raw', got '" + target + "'");
    }
    c.prototype_loss_on_raw = target == "raw";
    try {
        c.adaptor = parse_adaptor(s.text("adaptor", adaptor_name(c.adaptor)));
    } catch (const ValidationError& e) {
        throw UsageError(e.what());
    }
    c.validate();
    return c;
}

void write_json(const fs::path& path, const nlohmann::json& j) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

std::string safe_file_name(const std::string& id) {
    std::string out = id;
    for (auto& ch : out) {
        if (!(std::isalnum(static_cast<unsigned char>(ch)) || ch == '-' || ch == '_' || ch == '.')) ch = '_';
    }
    return out;
}

int cmd_train(const Settings& s, std::ostream& out) {
    const fs::path manifest = s.require("manifest");
    const TrainConfig cfg = train_config(s);
    const fs::path dir = prepare_out(s);
    const Dataset ds = load_dataset(manifest);
    const TrainResult r = train(cfg, ds);
    save_checkpoint(dir / "checkpoint.pckp", r.best);
    write_metrics_csv(dir / "metrics.csv", r.metrics);
    s.echo(dir / "run_config.txt");
    out << "trained " << cfg.total_steps << " steps; best step " << r.best.step
        << ", validation loss " << r.best.validation_loss << "\n";
    return 0;
}

int cmd_eval(const Settings& s, std::ostream& out) {
    const fs::path ckpt_path = s.require("checkpoint");
    const fs::path manifest = s.require("manifest");
    const Split split = split_of(s, "test");
    const fs::path dir = prepare_out(s);
    const Checkpoint ckpt = load_checkpoint(ckpt_path);
    const Dataset ds = load_dataset(manifest);
    if (ds.labels != ckpt.model.labels) {
        throw ValidationError("dataset label space differs from the checkpoint's");
    }
    const EvalReport report = evaluate(ckpt.model, ds, split);
    write_json(dir / "eval.json", to_json(report, ds.labels));
    write_confusion_csv(dir / "confusion.csv", report, ds.labels);
    write_predictions_csv(dir / "predictions.csv", report, ds.labels);
    s.echo(dir / "run_config.txt");
    out << "class_normalized_accuracy " << report.class_normalized_accuracy << " on "
        << report.predictions.size() << " " << split_name(split) << " tracks\n";
    return 0;
}

int cmd_explain(const Settings& s, std::ostream& out) {
    const fs::path ckpt_path = s.require("checkpoint");
    const fs::path manifest = s.require("manifest");
    const Split split = split_of(s, "test");
    const std::size_t top_k = s.count("top-k", 5);
    const fs::path dir = prepare_out(s);
    const Checkpoint ckpt = load_checkpoint(ckpt_path);
    const Dataset ds = load_dataset(manifest);
    if (ds.labels != ckpt.model.labels) {
        throw ValidationError("dataset label space differs from the checkpoint's");
    }
    const fs::path explain_dir = dir / "explain";
    fs::create_directories(explain_dir);
    std::size_t n = 0;
    for (const auto* rec : ds.split(split)) {
        const auto e = explain_prediction(ckpt.model, *rec, top_k);
        write_json(explain_dir / (safe_file_name(rec->id) + ".json"), to_json(e, ds.labels));
        ++n;
    }
    s.echo(dir / "run_config.txt");
    out << "wrote " << n << " explanations to " << explain_dir.string() << "\n";
    return 0;
}

int cmd_export(const Settings& s, std::ostream& out) {
    const fs::path ckpt_path = s.require("checkpoint");
    const auto manifest = s.find("manifest");
    const fs::path dir = prepare_out(s);
    const Checkpoint ckpt = load_checkpoint(ckpt_path);
    std::optional<Dataset> ds;
    if (manifest) {
        s.require("manifest");
        ds = load_dataset(*manifest);
    }
    ExportOptions opts;
    opts.dataset = ds ? &*ds : nullptr;
    opts.neighbors = s.count("top-k", 3);
    std::ifstream in(ckpt_path, std::ios::binary);
    const std::vector<unsigned char> bytes{std::istreambuf_iterator<char>(in), {}};
    opts.checkpoint_hash = fnv1a_hex(bytes);
    export_prototypes(ckpt.model, dir / "protos", opts);
    write_json(dir / "self_check.json", to_json(self_classify_prototypes(ckpt.model), ckpt.model.labels));
    s.echo(dir / "run_config.txt");
    out << "exported " << ckpt.model.num_prototypes() << " prototypes to "
        << (dir / "protos").string() << "\n";
    return 0;
}

int cmd_self_check(const Settings& s, std::ostream& out) {
    const std::uint64_t base = s.seed();
    std::size_t grad_pass = 0;
    for (std::uint64_t i = 0; i < 100; ++i) {
        const auto g = synth::run_gradient_check(base + i);
        if (g.passed) {
            ++grad_pass;
        } else {
            out << "  gradient mismatch: " << g.describe() << "\n";
        }
    }
    std::size_t km_pass = 0;
    for (std::uint64_t i = 0; i < 50; ++i) {
        const auto k = synth::run_kmeans_check(base + i);
        if (k.passed) {
            ++km_pass;
        } else {
            out << "  kmeans mismatch: seed=" << k.seed << " lloyd=" << k.lloyd_inertia
                << " optimal=" << k.optimal_inertia << "\n";
        }
    }
    const bool grad_ok = grad_pass == 100;
    const bool km_ok = km_pass == 50;
    out << (grad_ok ? "PASS" : "FAIL") << " gradient oracle " << grad_pass << "/100\n";
    out << (km_ok ? "PASS" : "FAIL") << " kmeans oracle " << km_pass << "/50\n";
    return grad_ok && km_ok ? 0 : 1;
}

int cmd_synth(const Settings& s, std::ostream& out) {
    synth::BlobSpec spec;
    spec.n_classes = s.count("classes", spec.n_classes);
    spec.per_class = s.count("tracks-per-class", spec.per_class);
    spec.dim = s.count("dim", spec.dim);
    spec.center_scale = s.real("center-scale", spec.center_scale);
    spec.noise_std = s.real("noise-std", spec.noise_std);
    spec.segments_per_track = s.count("segments", spec.segments_per_track);
    spec.seed = s.seed();
    const fs::path dir = prepare_out(s);
    const auto manifest = synth::gen_blobs(spec, dir);
    s.echo(dir / "run_config.txt");
    out << "wrote " << spec.n_classes * spec.per_class << " tracks to " << manifest.string() << "\n";
    return 0;
}

int cmd_inspect_init(const Settings& s, std::ostream& out) {
    const fs::path manifest = s.require("manifest");
    const std::size_t per_class = s.count("prototypes-per-class", 5);
    const std::uint64_t seed = s.seed();
    const Dataset ds = load_dataset(manifest);
    const Normalizer norm = fit_normalizer(ds);
    std::vector<ClassInit> summary;
    const PrototypeBank bank = init_prototypes(ds, norm, per_class, seed, &summary);

    nlohmann::json classes = nlohmann::json::array();
    for (const auto& ci : summary) {
        const Matrix rows = class_train_rows(ds, norm, ci.class_index);
        Vector center(ds.dim, 0.0);
        for (std::size_t r = 0; r < rows.rows(); ++r) {
            for (std::size_t d = 0; d < ds.dim; ++d) center[d] += rows(r, d);
        }
        for (auto& v : center) v /= static_cast<double>(rows.rows());
        nlohmann::json dists = nlohmann::json::array();
        for (std::size_t j = 0; j < per_class; ++j) {
            dists.push_back(std::sqrt(squared_distance(bank.p.row(ci.class_index * per_class + j), center)));
        }
        classes.push_back({{"class", ds.labels.name(ci.class_index)},
                           {"train_rows", ci.rows},
                           {"inertia", ci.inertia},
                           {"prototype_center_distance", std::move(dists)}});
        out << ds.labels.name(ci.class_index) << ": rows=" << ci.rows << " inertia=" << ci.inertia << "\n";
    }
    if (const auto dir = s.find("out")) {
        const fs::path d = prepare_out(s);
        write_json(d / "init.json", {{"prototypes_per_class", per_class}, {"seed", seed}, {"classes", classes}});
        s.echo(d / "run_config.txt");
    }
    return 0;
}

void print_error(std::ostream& err, const char* kind, const std::string& message) {
    err << nlohmann::json{{"error", kind}, {"message", message}}.dump() << '\n';
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Prototype classifier over precomputed audio embeddings", "protoscope"};
    app.require_subcommand(1);

    const std::vector<std::pair<std::string, std::string>> train_opts = {
        {"manifest", "JSON-Lines dataset manifest"},
        {"out", "output directory"},
        {"seed", "random seed (falls back to PROTOSCOPE_SEED)"},
        {"lambda", "classification loss weight"},
        {"prototypes-per-class", "prototypes per class"},
        {"adaptor", "identity | residual-mlp | set-attention"},
        {"batch-size", "mini-batch size"},
        {"steps", "total optimizer steps"},
        {"peak-lr", "one-cycle peak learning rate"},
        {"weight-decay", "decoupled weight decay"},
        {"validate-every", "steps between validation passes"},
        {"prototype-loss", "adapted | raw: which prototypes the prototype loss measures"},
    };

    std::map<std::string, Command> commands;
    const auto make = [&](const std::string& name, const std::string& help,
                          const std::vector<std::pair<std::string, std::string>>& opts) {
        Command& c = commands[name];
        c.app = app.add_subcommand(name, help);
        add_options(c, opts);
    };
    make("train", "train a model and write checkpoint.pckp + metrics.csv", train_opts);
    make("eval", "evaluate a checkpoint on a split",
         {{"manifest", "dataset manifest"}, {"checkpoint", "checkpoint file"}, {"out", "output directory"},
          {"split", "train | valid | test"}});
    make("explain", "write per-track prototype attributions",
         {{"manifest", "dataset manifest"}, {"checkpoint", "checkpoint file"}, {"out", "output directory"},
          {"split", "train | valid | test"}, {"top-k", "prototypes listed per track"}});
    make("export-protos", "export prototypes as PEMB files for an external decoder",
         {{"checkpoint", "checkpoint file"}, {"out", "output directory"},
          {"manifest", "dataset manifest (adds nearest train segments)"},
          {"top-k", "nearest segments listed per prototype"}});
    make("self-check", "run the gradient and k-means oracle suites", {{"seed", "base seed"}});
    make("synth-data", "generate a Gaussian blob dataset",
         {{"out", "output directory"}, {"seed", "random seed"}, {"classes", "number of classes"},
          {"tracks-per-class", "tracks per class"}, {"dim", "embedding dimension"},
          {"center-scale", "class centers drawn from [-s, s]^D"}, {"noise-std", "segment noise std"},
          {"segments", "segments per track"}});
    make("inspect-init", "summarize k-means prototype initialization",
         {{"manifest", "dataset manifest"}, {"prototypes-per-class", "prototypes per class"},
          {"seed", "random seed"}, {"out", "optional output directory"}});

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        print_error(err, "usage", e.what());
        err << app.help();
        return 2;
    }

    try {
        for (auto& [name, cmd] : commands) {
            if (!cmd.app->parsed()) continue;
            const Settings s = resolve(cmd);
            if (name == "train") return cmd_train(s, out);
            if (name == "eval") return cmd_eval(s, out);
            if (name == "explain") return cmd_explain(s, out);
            if (name == "export-protos") return cmd_export(s, out);
            if (name == "self-check") return cmd_self_check(s, out);
            if (name == "synth-data") return cmd_synth(s, out);
            if (name == "inspect-init") return cmd_inspect_init(s, out);
        }
    } catch (const UsageError& e) {
        print_error(err, e.kind(), e.what());
        return 2;
    } catch (const Error& e) {
        print_error(err, e.kind(), e.what());
        return 1;
    } catch (const std::exception& e) {
        print_error(err, "internal", e.what());
        return 1;
    }
    print_error(err, "usage", "no subcommand given");
    return 2;
}

}  // namespace protoscope::cli
