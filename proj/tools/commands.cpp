// Compiled twice: once as is and once with DVERGE_DOUBLE.
#include "commands.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "dverge/dverge.hpp"
#include "dverge/version.hpp"

DVERGE_NAMESPACE_BEGIN

namespace {

namespace fs = std::filesystem;
using cli::ConfigError;
using cli::Json;
using cli::Reader;

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

std::string digest_of(const std::string& bytes) { return hex64(fnv1a64(bytes.data(), bytes.size())); }

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

/// Writes artifacts under the output directory and records each one for the
/// provenance file.
class Artifacts {
public:
    Artifacts(const cli::Invocation& inv) : inv_(inv) {
        fs::create_directories(inv.out);
        config_text_ = inv.config.dump(2) + "\n";
        config_digest_ = digest_of(config_text_);
        seed_ = inv.config.at("seed").get<std::uint64_t>();
        write_raw("resolved_config.json", config_text_);
    }

    Json provenance() const {
        return {{"command", inv_.command}, {"version", kVersion}, {"seed", seed_}, {"config_digest", config_digest_}};
    }

    void json(const std::string& name, Json body) {
        body["provenance"] = provenance();
        write_raw(name, body.dump(2) + "\n");
    }

    /// CSV with a metadata comment line ahead of the column header.
    void csv(const std::string& name, const std::string& header, const std::vector<std::vector<std::string>>& rows) {
        std::string s = "# dverge " + inv_.command + " version=" + kVersion + " seed=" + std::to_string(seed_) +
                        " config_digest=" + config_digest_ + "\n" + header + "\n";
        for (const auto& r : rows) {
            for (std::size_t k = 0; k < r.size(); ++k) s += (k ? "," : "") + r[k];
            s += "\n";
        }
        write_raw(name, s);
    }

    void text(const std::string& name, const std::string& body) { write_raw(name, body); }

    /// Records files another writer produced (IDX, checkpoints).
    void adopt(const fs::path& rel) {
        const fs::path p = inv_.out / rel;
        if (fs::is_directory(p)) {
            std::vector<fs::path> files;
            for (const auto& e : fs::recursive_directory_iterator(p)) {
                if (e.is_regular_file()) files.push_back(fs::relative(e.path(), inv_.out));
            }
            std::sort(files.begin(), files.end());
            for (const auto& f : files) record(f.generic_string(), read_file(inv_.out / f));
        } else {
            record(rel.generic_string(), read_file(p));
        }
    }

    void finish() {
        Json files = Json::array();
        for (const auto& [name, d] : files_) files.push_back({{"file", name}, {"digest", d.first}, {"bytes", d.second}});
        Json p = provenance();
        p["precision"] = inv_.config.at("precision");
        p["artifacts"] = files;
        std::ofstream(inv_.out / "provenance.json", std::ios::binary) << p.dump(2) << "\n";
    }

    const fs::path& dir() const { return inv_.out; }

private:
    void write_raw(const std::string& name, const std::string& bytes) {
        std::ofstream(inv_.out / name, std::ios::binary) << bytes;
        record(name, bytes);
    }
    void record(const std::string& name, const std::string& bytes) {
        files_[name] = {digest_of(bytes), bytes.size()};
    }

    const cli::Invocation& inv_;
    std::string config_text_;
    std::string config_digest_;
    std::uint64_t seed_ = 0;
    std::map<std::string, std::pair<std::string, std::size_t>> files_;
};

struct Context {
    const cli::Invocation& inv;
    Reader r;
    std::uint64_t seed;
    std::size_t workers;

    explicit Context(const cli::Invocation& i)
        : inv(i), r(i.config), seed(r.uint("/seed")), workers(r.count("/workers", 1)) {}
};

SyntheticSpec synthetic_spec(const Reader& r, bool test) {
    SyntheticSpec s;
    s.classes = r.count("/data/classes", 2);
    s.per_class = r.count(test ? "/data/test_per_class" : "/data/per_class", 1);
    s.size = r.count("/data/size", 4);
    s.channels = r.count("/data/channels", 1);
    s.noise = r.non_negative("/data/noise");
    s.jitter = r.count("/data/jitter");
    s.amplitude = r.in_range("/data/amplitude", 0, 1);
    s.background = r.in_range("/data/background", 0, 1);
    if (s.amplitude <= 0) throw ConfigError("/data/amplitude", "must be > 0");
    if (s.background + s.amplitude > 1) throw ConfigError("/data/background", "background + amplitude must be <= 1");
    s.seed = r.uint("/data/seed");
    return s;
}

Dataset load_split(const Reader& r, const std::string& split) {
    const std::string source = r.choice("/data/source", {"synthetic", "idx"});
    if (source == "synthetic") return gen_synthetic(synthetic_spec(r, split == "test"), split);
    const std::string ip = "/data/" + split + "_images", lp = "/data/" + split + "_labels";
    const std::string images = r.string(ip), labels = r.string(lp);
    if (images.empty() || !fs::exists(images)) throw ConfigError(ip, "IDX image file not found: " + images);
    if (labels.empty() || !fs::exists(labels)) throw ConfigError(lp, "IDX label file not found: " + labels);
    Dataset d = load_idx(images, labels, r.count("/data/classes", 2));
    d.split = split;
    return d;
}

Dataset eval_set(const Reader& r) {
    Dataset test = load_split(r, "test");
    const std::size_t n = r.count("/eval/samples", 1);
    return n < test.size() ? test.head(n) : test;
}

LabeledSet view(const Dataset& d) { return {&d.images, d.labels}; }

ModelSpec model_spec(const Reader& r, const Dataset& d) {
    ModelSpec m;
    m.arch = parse_architecture(r.choice("/model/arch", {"mlp-small", "cnn-small", "cnn-residual"}));
    m.activation = parse_activation(r.choice("/model/activation", {"relu", "leaky-relu"}));
    m.width = r.count("/model/width", 1);
    m.seed = r.uint("/model/seed");
    m.input_shape = d.sample_shape();
    m.classes = d.classes;
    return m;
}

LossKind loss_kind(const Reader& r, const std::string& p) { return parse_loss_kind(r.choice(p, {"ce", "cw"})); }

AttackSpec attack_spec(const Reader& r, const std::string& s) {
    AttackSpec a;
    a.epsilon = static_cast<Scalar>(r.in_range(s + "/epsilon", 0, 1));
    a.steps = r.count(s + "/steps");
    a.step_size = static_cast<Scalar>(r.non_negative(s + "/step_size"));
    a.momentum = static_cast<Scalar>(r.non_negative(s + "/momentum"));
    a.restarts = r.count(s + "/restarts", 1);
    a.loss = loss_kind(r, s + "/loss");
    a.start_at_zero = r.flag(s + "/start_at_zero");
    return a;
}

DistillSpec distill_spec(const Reader& r) {
    DistillSpec d;
    d.epsilon = static_cast<Scalar>(r.in_range("/distill/epsilon", 0, 1));
    d.steps = r.count("/distill/steps");
    d.step_size = static_cast<Scalar>(r.non_negative("/distill/step_size"));
    d.momentum = static_cast<Scalar>(r.non_negative("/distill/momentum"));
    d.layer = r.count("/distill/layer", 1);
    d.best_iterate = r.flag("/distill/best_iterate");
    return d;
}

LayerPolicy layer_policy(const Reader& r, const std::string& p) {
    const Json& j = r.at(p);
    if (j.is_string()) {
        if (j.get<std::string>() != "uniform") throw ConfigError(p, "must be \"uniform\" or a tap index");
        return LayerPolicy::uniform();
    }
    return LayerPolicy::fixed(r.count(p, 1));
}

TrainPlan train_plan(const Context& c) {
    const Reader& r = c.r;
    TrainPlan p;
    p.mode = parse_train_mode(r.choice("/train/mode", {"baseline", "dverge", "advt", "dverge+advt"}));
    p.n = r.count("/train/n", 1);
    p.epochs = r.count("/train/epochs");
    p.pretrain_epochs = r.count("/train/pretrain_epochs");
    p.batch_size = r.count("/train/batch_size", 1);
    p.batches_per_epoch = r.count("/train/batches_per_epoch");
    p.lr = static_cast<Scalar>(r.positive("/train/lr"));
    p.pretrain_lr = static_cast<Scalar>(r.non_negative("/train/pretrain_lr"));
    p.lr_decay = static_cast<Scalar>(r.in_range("/train/lr_decay", 0, 1));
    p.decay_epochs = r.counts("/train/decay_epochs");
    p.momentum = static_cast<Scalar>(r.in_range("/train/momentum", 0, 1));
    p.weight_decay = static_cast<Scalar>(r.non_negative("/train/weight_decay"));
    p.lambda = static_cast<Scalar>(r.non_negative("/train/lambda"));
    p.layer_policy = layer_policy(r, "/train/layer");
    const Json& frozen = r.at("/train/frozen");
    if (!frozen.is_array()) throw ConfigError("/train/frozen", "expected an array");
    for (std::size_t i = 0; i < frozen.size(); ++i) p.frozen.push_back(r.flag("/train/frozen/" + std::to_string(i)));
    if (!p.frozen.empty() && p.frozen.size() != p.n) throw ConfigError("/train/frozen", "needs one entry per sub-model");
    p.distill = distill_spec(r);
    p.advt = attack_spec(r, "/advt");
    p.seed = c.seed;
    p.workers = c.workers;
    p.probe.enabled = r.flag("/train/probe/enabled");
    p.probe.samples = r.count("/train/probe/samples", 1);
    p.probe.diversity_samples = r.count("/train/probe/diversity_samples", 1);
    p.probe.attack.epsilon = static_cast<Scalar>(r.in_range("/train/probe/epsilon", 0, 1));
    p.probe.attack.steps = r.count("/train/probe/steps");
    p.probe.attack.step_size = static_cast<Scalar>(r.non_negative("/train/probe/step_size"));
    p.probe.attack.restarts = 1;
    p.probe.distill = p.distill;
    r.count("/train/probe/rolling_window", 1);
    try {
        p.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError("/train", e.what());
    }
    return p;
}

BatterySpec battery_spec(const Reader& r) {
    BatterySpec b;
    b.entries.clear();
    const Json& entries = r.at("/eval/battery/entries");
    if (!entries.is_array()) throw ConfigError("/eval/battery/entries", "expected an array");
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const std::string p = "/eval/battery/entries/" + std::to_string(i);
        if (!entries[i].is_object()) throw ConfigError(p, "expected an object");
        for (const auto& [key, v] : entries[i].items()) {
            if (key != "loss" && key != "restarts") throw ConfigError(p + "/" + key, "unknown key");
        }
        b.entries.push_back({loss_kind(r, p + "/loss"), r.count(p + "/restarts", 1)});
    }
    b.steps = r.count("/eval/battery/steps", 1);
    b.step_ratio = static_cast<Scalar>(r.positive("/eval/battery/step_ratio"));
    b.momentum = static_cast<Scalar>(r.non_negative("/eval/battery/momentum"));
    return b;
}

Ensemble load_ensemble(const std::string& dir, const std::string& pointer) {
    if (dir.empty()) throw cli::CheckpointError("no checkpoint given (" + pointer + ")");
    if (!fs::exists(fs::path(dir) / "ensemble.json")) {
        throw cli::CheckpointError("checkpoint not found: " + dir + " (" + pointer + ")");
    }
    try {
        return load_checkpoint(dir);
    } catch (const std::exception& e) {
        throw cli::CheckpointError("checkpoint " + dir + ": " + e.what());
    }
}

Ensemble checkpoint(const Context& c) { return load_ensemble(c.r.string("/checkpoint"), "/checkpoint"); }

std::vector<Ensemble> surrogates(const Context& c) {
    std::vector<Ensemble> out;
    const auto dirs = c.r.strings("/eval/surrogates");
    for (std::size_t i = 0; i < dirs.size(); ++i) out.push_back(load_ensemble(dirs[i], "/eval/surrogates/" + std::to_string(i)));
    return out;
}

std::vector<Scalar> eps_list(const Reader& r) {
    std::vector<Scalar> out;
    const auto v = r.numbers("/eval/eps");
    for (std::size_t i = 0; i < v.size(); ++i) {
        const std::string p = "/eval/eps/" + std::to_string(i);
        if (v[i] < 0 || v[i] > 1) throw ConfigError(p, "must be in [0, 1]");
        if (i > 0 && v[i] < v[i - 1]) throw ConfigError(p, "epsilons must be ascending");
        out.push_back(static_cast<Scalar>(v[i]));
    }
    if (out.empty()) throw ConfigError("/eval/eps", "needs at least one epsilon");
    return out;
}

Json dataset_info(const Dataset& d) {
    Json j = {{"split", d.split}, {"count", d.size()}, {"classes", d.classes}, {"sample_shape", d.sample_shape()}};
    j["source"] = d.provenance;
    return j;
}

// ---- commands ----

int gen_data(Context& c, Artifacts& out) {
    Json info = Json::object();
    for (const std::string split : {"train", "test"}) {
        Dataset d = load_split(c.r, split);
        write_idx(d, out.dir() / (split + "-images.idx"), out.dir() / (split + "-labels.idx"));
        out.adopt(split + "-images.idx");
        out.adopt(split + "-labels.idx");
        info[split] = dataset_info(d);
    }
    out.json("dataset.json", info);
    return 0;
}

int train_cmd(Context& c, Artifacts& out) {
    const TrainPlan plan = train_plan(c);
    const Dataset train_set = load_split(c.r, "train");
    const Dataset test = eval_set(c.r);
    Ensemble ensemble = Ensemble::build(model_spec(c.r, train_set), plan.n);
    TrainLog log = train(ensemble, plan, train_set, &test);

    save_checkpoint(ensemble, out.dir() / "checkpoint");
    out.adopt("checkpoint");
    out.text("train_log.jsonl", log.to_jsonl());

    Json summary = {{"mode", to_string(plan.mode)}, {"n", plan.n}, {"train", dataset_info(train_set)},
                    {"eval", dataset_info(test)}};
    std::vector<double> member_acc;
    for (std::size_t i = 0; i < ensemble.size(); ++i) member_acc.push_back(clean_accuracy(ensemble[i], view(test)));
    summary["member_clean_accuracy"] = member_acc;
    summary["ensemble_clean_accuracy"] = clean_accuracy(ensemble, view(test));
    if (plan.probe.enabled) {
        std::vector<double> tr, dv;
        for (const auto& rec : log.records) {
            if (rec.phase == "pretrain") continue;
            if (rec.transferability) tr.push_back(*rec.transferability);
            if (rec.diversity) dv.push_back(*rec.diversity);
        }
        const std::size_t w = c.r.count("/train/probe/rolling_window", 1);
        summary["rolling_window"] = w;
        summary["transferability_rolling"] = rolling_mean(tr, w);
        summary["diversity_rolling"] = rolling_mean(dv, w);
    }
    out.json("train_summary.json", summary);
    return 0;
}

int distill_cmd(Context& c, Artifacts& out) {
    Ensemble ensemble = checkpoint(c);
    const std::size_t member = c.r.count("/distill/member");
    if (member >= ensemble.size()) throw ConfigError("/distill/member", "no such sub-model");
    const Dataset test = load_split(c.r, "test");
    const std::size_t count = std::min(c.r.count("/distill/count", 1), test.size());
    DistillSpec spec = distill_spec(c.r);
    if (spec.layer > ensemble[member].tap_count()) throw ConfigError("/distill/layer", "tap index out of range");

    // targets are the first rows; sources a seeded draw from the whole split
    std::vector<std::size_t> tidx(count), sidx(count);
    Rng rng(derive_seed(c.seed, "distill"));
    for (std::size_t i = 0; i < count; ++i) {
        tidx[i] = i;
        sidx[i] = rng.below(test.size());
    }
    const Dataset targets = test.subset(tidx), sources = test.subset(sidx);
    DistilledBatch b = distill_features(ensemble[member], spec, targets.images, targets.labels, sources.images,
                                        sources.labels, c.seed, c.workers);
    Dataset emitted;
    emitted.images = b.distilled;
    emitted.labels = b.source_labels;
    emitted.classes = test.classes;
    emitted.split = "test";
    write_idx(emitted, out.dir() / "distilled-images.idx", out.dir() / "distilled-labels.idx");
    out.adopt("distilled-images.idx");
    out.adopt("distilled-labels.idx");

    std::vector<double> obj(b.objective_values.begin(), b.objective_values.end());
    std::vector<double> init(b.initial_values.begin(), b.initial_values.end());
    out.json("distill.json", {{"member", member},
                              {"layer", b.layer},
                              {"epsilon", spec.epsilon},
                              {"target_indices", tidx},
                              {"source_indices", sidx},
                              {"target_labels", b.target_labels},
                              {"source_labels", b.source_labels},
                              {"objective", obj},
                              {"initial_objective", init},
                              {"note", "IDX pixels are rounded to multiples of 1/255"}});
    return 0;
}

int diversity_cmd(Context& c, Artifacts& out) {
    Ensemble ensemble = checkpoint(c);
    const Dataset test = eval_set(c.r);
    const DistillSpec spec = distill_spec(c.r);
    const LayerPolicy policy = layer_policy(c.r, "/diversity/layer");
    const std::size_t samples = c.r.count("/diversity/samples", 1);
    const std::size_t n = ensemble.size();
    std::vector<double> m(n * n, 0.0);
    Json pairs = Json::array();
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            DiversityEstimate d = pairwise_diversity(ensemble[i], ensemble[j], view(test), spec, policy, samples,
                                                     derive_seed(c.seed, i * n + j));
            m[i * n + j] = m[j * n + i] = d.value;
            pairs.push_back({{"i", i}, {"j", j}, {"value", d.value}, {"samples", d.sample_count}});
        }
    }
    std::vector<std::vector<std::string>> rows;
    std::string header = "model";
    for (std::size_t j = 0; j < n; ++j) header += "," + ensemble[j].id();
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<std::string> row{ensemble[i].id()};
        for (std::size_t j = 0; j < n; ++j) row.push_back(fmt(m[i * n + j]));
        rows.push_back(row);
    }
    out.csv("diversity.csv", header, rows);
    out.json("diversity.json", {{"matrix", m},
                                {"pairs", pairs},
                                {"epsilon", spec.epsilon},
                                {"layer_policy", policy.describe()},
                                {"samples", samples}});
    return 0;
}

int transfer_cmd(Context& c, Artifacts& out) {
    Ensemble ensemble = checkpoint(c);
    const Dataset test = load_split(c.r, "test");
    const AttackSpec spec = attack_spec(c.r, "/attack");
    TransferMatrix tm = transfer_matrix(ensemble, spec, view(test), c.r.count("/eval/samples", 1), c.seed, c.workers);
    std::vector<std::vector<std::string>> rows;
    std::string header = "source";
    for (std::size_t j = 0; j < tm.n; ++j) header += "," + ensemble[j].id();
    for (std::size_t i = 0; i < tm.n; ++i) {
        std::vector<std::string> row{ensemble[i].id()};
        for (std::size_t j = 0; j < tm.n; ++j) row.push_back(fmt(tm.at(i, j)));
        rows.push_back(row);
    }
    out.csv("transfer_matrix.csv", header, rows);
    out.json("transfer_matrix.json", {{"n", tm.n},
                                      {"values", tm.values},
                                      {"mean_off_diagonal", tm.mean_off_diagonal()},
                                      {"epsilon", tm.epsilon},
                                      {"steps", tm.steps},
                                      {"restarts", tm.restarts},
                                      {"sample_count", tm.sample_count},
                                      {"sample_indices", tm.sample_indices},
                                      {"rows", "source sub-model (adversarials generated against it)"},
                                      {"columns", "evaluated sub-model"}});
    return 0;
}

struct Sweep {
    std::vector<Scalar> eps;
    double clean = 0;
    std::vector<double> whitebox;
    std::vector<double> blackbox;
    std::string battery;
};

Sweep run_sweep(Context& c, Ensemble& ensemble, const Dataset& test) {
    Sweep s;
    s.eps = eps_list(c.r);
    const AttackSpec tmpl = attack_spec(c.r, "/attack");
    s.clean = clean_accuracy(ensemble, view(test));
    s.whitebox = whitebox_eval(ensemble, s.eps, tmpl, view(test), c.seed,
                               static_cast<Scalar>(c.r.positive("/eval/step_ratio")), c.workers);
    std::vector<Ensemble> surs = surrogates(c);
    const BatterySpec battery = battery_spec(c.r);
    s.battery = battery.describe();
    if (!surs.empty()) {
        std::vector<Ensemble*> ptrs;
        for (auto& e : surs) ptrs.push_back(&e);
        for (std::size_t k = 0; k < s.eps.size(); ++k) {
            s.blackbox.push_back(blackbox_eval(ensemble, ptrs, s.eps[k], battery, view(test),
                                               derive_seed(c.seed, "blackbox"), c.workers));
        }
    }
    return s;
}

int attack_eval_cmd(Context& c, Artifacts& out) {
    Ensemble ensemble = checkpoint(c);
    const Dataset test = eval_set(c.r);
    Sweep s = run_sweep(c, ensemble, test);
    EvalReport rep;
    rep.clean_accuracy = s.clean;
    rep.eps = s.eps;
    rep.whitebox = s.whitebox;
    rep.blackbox = s.blackbox;
    rep.battery = s.battery;
    rep.sample_count = test.size();
    rep.seed = c.seed;
    out.json("attack_eval.json", Json::parse(rep.to_json()));
    return 0;
}

int sweep_cmd(Context& c, Artifacts& out) {
    Ensemble ensemble = checkpoint(c);
    const Dataset test = eval_set(c.r);
    Sweep s = run_sweep(c, ensemble, test);
    std::vector<std::vector<std::string>> rows;
    for (std::size_t k = 0; k < s.eps.size(); ++k) {
        std::vector<std::string> row{fmt(s.eps[k]), fmt(s.whitebox[k])};
        if (!s.blackbox.empty()) row.push_back(fmt(s.blackbox[k]));
        rows.push_back(row);
    }
    out.csv("sweep_eps.csv", s.blackbox.empty() ? "epsilon,whitebox" : "epsilon,whitebox,blackbox", rows);
    std::vector<double> eps(s.eps.begin(), s.eps.end());
    out.json("sweep_eps.json", {{"clean_accuracy", s.clean},
                                {"eps", eps},
                                {"whitebox", s.whitebox},
                                {"blackbox", s.blackbox},
                                {"battery", s.battery},
                                {"sample_count", test.size()}});
    return 0;
}

int decision_cmd(Context& c, Artifacts& out) {
    Ensemble ensemble = checkpoint(c);
    const Dataset test = load_split(c.r, "test");
    const std::size_t index = c.r.count("/eval/grid/index");
    if (index >= test.size()) throw ConfigError("/eval/grid/index", "beyond the test split");
    const std::size_t g = c.r.count("/eval/grid/resolution", 3);
    if (g % 2 == 0) throw ConfigError("/eval/grid/resolution", "must be odd");
    const Scalar eps_max = static_cast<Scalar>(c.r.in_range("/eval/grid/eps_max", 0, 1));
    std::vector<Ensemble> surs = surrogates(c);
    Ensemble& surrogate = surs.empty() ? ensemble : surs.front();
    const Tensor image = test.images.slice_rows(index, index + 1);
    DecisionGrid grid = decision_grid(ensemble, surrogate, image, test.labels[index], g, eps_max, c.seed,
                                      c.r.flag("/eval/grid/pgd_direction"));
    std::vector<std::vector<std::string>> rows;
    std::string header = "row\\col";
    for (std::size_t k = 0; k < g; ++k) header += "," + fmt(grid.offset(k));
    for (std::size_t i = 0; i < g; ++i) {
        std::vector<std::string> row{fmt(grid.offset(i))};
        for (std::size_t j = 0; j < g; ++j) row.push_back(std::to_string(grid.at(i, j)));
        rows.push_back(row);
    }
    out.csv("decision_region.csv", header, rows);
    out.json("decision_region.json", {{"index", index},
                                      {"label", test.labels[index]},
                                      {"resolution", g},
                                      {"eps_max", eps_max},
                                      {"labels", grid.labels},
                                      {"surrogate", surs.empty() ? "self" : c.r.strings("/eval/surrogates").front()},
                                      {"vertical", "sign of the surrogate's loss gradient"},
                                      {"horizontal", "Rademacher direction"},
                                      {"diagnostic", grid.diagnostic}});
    return 0;
}

int convergence_cmd(Context& c, Artifacts& out) {
    Ensemble ensemble = checkpoint(c);
    const Dataset test = eval_set(c.r);
    const auto its = c.r.counts("/eval/iterations");
    for (std::size_t i = 1; i < its.size(); ++i) {
        if (its[i] < its[i - 1]) throw ConfigError("/eval/iterations/" + std::to_string(i), "must be ascending");
    }
    const AttackSpec spec = attack_spec(c.r, "/attack");
    const auto acc = convergence_check(ensemble, its, spec, view(test), c.seed, c.workers);
    std::vector<std::vector<std::string>> rows;
    for (std::size_t i = 0; i < its.size(); ++i) rows.push_back({std::to_string(its[i]), fmt(acc[i])});
    out.csv("convergence.csv", "iterations,whitebox", rows);
    out.json("convergence.json", {{"iterations", its}, {"whitebox", acc}, {"epsilon", spec.epsilon}});
    return 0;
}

int run_command(const cli::Invocation& inv) {
    Context c(inv);
    Artifacts out(inv);
    const std::string& cmd = inv.command;
    int rc = 0;
    if (cmd == "gen-data") rc = gen_data(c, out);
    else if (cmd == "train") rc = train_cmd(c, out);
    else if (cmd == "distill") rc = distill_cmd(c, out);
    else if (cmd == "diversity") rc = diversity_cmd(c, out);
    else if (cmd == "transfer-matrix") rc = transfer_cmd(c, out);
    else if (cmd == "attack-eval") rc = attack_eval_cmd(c, out);
    else if (cmd == "decision-region") rc = decision_cmd(c, out);
    else if (cmd == "sweep-eps") rc = sweep_cmd(c, out);
    else if (cmd == "convergence-check") rc = convergence_cmd(c, out);
    else throw std::invalid_argument("unknown command " + cmd);
    out.finish();
    return rc;
}

}  // namespace

DVERGE_NAMESPACE_END

namespace dverge::cli {
#ifdef DVERGE_DOUBLE
int run_command_f64(const Invocation& inv) { return dverge::run_command(inv); }
#else
int run_command_f32(const Invocation& inv) { return dverge::run_command(inv); }
#endif
}  // namespace dverge::cli
