#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "commands.hpp"
#include "dverge/version.hpp"

namespace {

using dverge::cli::Json;

// Single-line machine-parsable error on stderr.
int fail(int code, const std::string& kind, const std::string& message, const std::string& path = "") {
    Json j = {{"error", kind}, {"message", message}};
    if (!path.empty()) j["path"] = path;
    std::cerr << j.dump() << std::endl;
    return code;
}

struct FlagSpec {
    const char* flag;
    const char* pointer;
    const char* help;
};

// Named shortcuts for frequently changed keys, per subcommand.
const std::map<std::string, std::vector<FlagSpec>> kFlags = {
    {"gen-data", {{"--noise", "/data/noise", "pixel noise level"}, {"--per-class", "/data/per_class", "train samples per class"}}},
    {"train",
     {{"--mode", "/train/mode", "baseline | dverge | advt | dverge+advt"},
      {"--n", "/train/n", "number of sub-models"},
      {"--epochs", "/train/epochs", "epochs of the selected mode"},
      {"--pretrain-epochs", "/train/pretrain_epochs", "clean pretraining epochs"},
      {"--arch", "/model/arch", "mlp-small | cnn-small | cnn-residual"},
      {"--lr", "/train/lr", "learning rate"},
      {"--distill-eps", "/distill/epsilon", "feature distillation epsilon"}}},
    {"distill",
     {{"--member", "/distill/member", "sub-model index"},
      {"--layer", "/distill/layer", "1-based tap index"},
      {"--distill-eps", "/distill/epsilon", "feature distillation epsilon"}}},
    {"diversity", {{"--samples", "/diversity/samples", "Monte Carlo samples"}, {"--layer", "/diversity/layer", "uniform or a tap index"}}},
    {"transfer-matrix", {{"--samples", "/eval/samples", "commonly-correct samples"}, {"--eps", "/attack/epsilon", "attack epsilon"}}},
    {"attack-eval", {{"--eps", "/eval/eps", "comma-separated epsilons"}, {"--samples", "/eval/samples", "evaluation samples"}}},
    {"decision-region",
     {{"--index", "/eval/grid/index", "test sample index"},
      {"--resolution", "/eval/grid/resolution", "odd grid size"},
      {"--eps-max", "/eval/grid/eps_max", "grid half-width"}}},
    {"sweep-eps", {{"--eps", "/eval/eps", "comma-separated epsilons"}, {"--samples", "/eval/samples", "evaluation samples"}}},
    {"convergence-check", {{"--iterations", "/eval/iterations", "comma-separated iteration budgets"}, {"--samples", "/eval/samples", "evaluation samples"}}},
};

struct Sub {
    CLI::App* app = nullptr;
    std::string config;
    std::string out;
    std::optional<std::string> seed, workers, precision, checkpoint;
    std::vector<std::string> surrogates;
    std::vector<std::string> sets;
    std::map<std::string, std::optional<std::string>> named;
};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{std::string("dverge ") + dverge::kVersion +
                 ": vulnerability-diversity ensemble training and robustness evaluation.\n"
                 "Configuration precedence: built-in defaults < --config file < named flags < --set (in order).\n"
                 "Every run writes resolved_config.json and provenance.json into --out; rerunning with\n"
                 "--config <out>/resolved_config.json --workers 1 reproduces the outputs bitwise.",
                 "dverge"};
    app.require_subcommand(1);
    app.set_version_flag("--version", dverge::kVersion);
    bool print_defaults = false;
    app.add_flag("--print-defaults", print_defaults, "print the default config (the JSON schema) and exit");

    std::map<std::string, Sub> subs;
    for (const char* name : dverge::cli::kCommands) {
        Sub& s = subs[name];
        s.app = app.add_subcommand(name);
        s.app->add_option("--config", s.config, "JSON config file")->check(CLI::ExistingFile);
        s.app->add_option("--out", s.out, "output directory")->required();
        s.app->add_option("--seed", s.seed, "global seed (/seed)");
        s.app->add_option("--workers", s.workers, "thread cap (/workers); 1 guarantees determinism");
        s.app->add_option("--precision", s.precision, "float32 | float64 (/precision)");
        s.app->add_option("--checkpoint", s.checkpoint, "ensemble checkpoint directory (/checkpoint)");
        s.app->add_option("--surrogate", s.surrogates, "surrogate checkpoint directory (appends to /eval/surrogates)");
        s.app->add_option("--set", s.sets, "override: key/path=value, e.g. --set train/lr=0.02");
        auto it = kFlags.find(name);
        if (it != kFlags.end()) {
            for (const auto& f : it->second) s.app->add_option(f.flag, s.named[f.flag], std::string(f.help) + " (" + f.pointer + ")");
        }
    }
    // --print-defaults works without a subcommand
    app.require_subcommand(0, 1);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        return fail(2, "usage", e.what());
    }
    if (print_defaults) {
        std::cout << dverge::cli::default_config().dump(2) << std::endl;
        return 0;
    }
    if (app.get_subcommands().empty()) return fail(2, "usage", "a subcommand is required");

    const std::string command = app.get_subcommands().front()->get_name();
    Sub& s = subs.at(command);
    std::vector<dverge::cli::Override> overrides;
    auto add = [&](const std::string& pointer, const std::optional<std::string>& v) {
        if (v) overrides.push_back({pointer, *v});
    };
    add("/seed", s.seed);
    add("/workers", s.workers);
    add("/precision", s.precision);
    add("/checkpoint", s.checkpoint);
    if (auto it = kFlags.find(command); it != kFlags.end()) {
        for (const auto& f : it->second) add(f.pointer, s.named[f.flag]);
    }
    for (const auto& kv : s.sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos || eq == 0) return fail(2, "usage", "--set expects key/path=value, got " + kv);
        std::string key = kv.substr(0, eq);
        for (auto& ch : key) {
            if (ch == '.') ch = '/';
        }
        if (key.front() != '/') key = "/" + key;
        overrides.push_back({key, kv.substr(eq + 1)});
    }

    try {
        Json cfg = dverge::cli::resolve_config(s.config, overrides);
        if (!s.surrogates.empty()) {
            for (const auto& d : s.surrogates) cfg["eval"]["surrogates"].push_back(d);
        }
        dverge::cli::Invocation inv{command, cfg, s.out};
        const std::string precision = dverge::cli::Reader(cfg).choice("/precision", {"float32", "float64"});
        return precision == "float64" ? dverge::cli::run_command_f64(inv) : dverge::cli::run_command_f32(inv);
    } catch (const dverge::cli::ConfigError& e) {
        return fail(2, "config", e.what(), e.path().empty() ? "/" : e.path());
    } catch (const dverge::cli::CheckpointError& e) {
        return fail(3, "checkpoint", e.what());
    } catch (const std::exception& e) {
        return fail(1, "runtime", e.what());
    }
}
