// Python bindings for the single-precision core. Images cross the boundary as
// float32 numpy arrays shaped [N, C, H, W]; labels as integer sequences.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "dverge/dverge.hpp"
#include "dverge/version.hpp"

namespace py = pybind11;
using namespace dverge;

namespace {

using Array = py::array_t<Scalar, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
    Shape shape(a.shape(), a.shape() + a.ndim());
    return Tensor(shape, std::vector<Scalar>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
    std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
    Array out(shape);
    std::copy(t.values().begin(), t.values().end(), out.mutable_data());
    return out;
}

Dataset make_dataset(const Array& images, std::vector<std::size_t> labels, std::size_t classes) {
    Dataset d;
    d.images = to_tensor(images);
    d.labels = std::move(labels);
    d.classes = classes;
    d.split = "test";
    d.validate();
    return d;
}

LabeledSet view(const Dataset& d) { return {&d.images, d.labels}; }

py::dict record_dict(const EpochRecord& r) {
    py::dict d;
    d["epoch"] = r.epoch;
    d["phase"] = r.phase;
    d["lr"] = r.lr;
    d["loss"] = r.loss;
    d["layer"] = r.layer ? py::cast(*r.layer) : py::none();
    d["clean_accuracy"] = r.clean_accuracy ? py::cast(*r.clean_accuracy) : py::none();
    d["diversity"] = r.diversity ? py::cast(*r.diversity) : py::none();
    d["transferability"] = r.transferability ? py::cast(*r.transferability) : py::none();
    return d;
}

std::vector<Ensemble*> pointers(std::vector<Ensemble>& v) {
    std::vector<Ensemble*> out;
    for (auto& e : v) out.push_back(&e);
    return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "DVERGE ensemble training, attacks and evaluation";
    m.attr("__version__") = kVersion;

    py::enum_<Architecture>(m, "Architecture")
        .value("MLP_SMALL", Architecture::MlpSmall)
        .value("CNN_SMALL", Architecture::CnnSmall)
        .value("CNN_RESIDUAL", Architecture::CnnResidual);
    py::enum_<Activation>(m, "Activation").value("RELU", Activation::Relu).value("LEAKY_RELU", Activation::LeakyRelu);
    py::enum_<TrainMode>(m, "TrainMode")
        .value("BASELINE", TrainMode::Baseline)
        .value("DVERGE", TrainMode::Dverge)
        .value("ADVT", TrainMode::AdvT)
        .value("DVERGE_ADVT", TrainMode::DvergeAdvT);
    py::enum_<LossKind>(m, "LossKind").value("CE", LossKind::CE).value("CW", LossKind::CW);

    py::class_<Dataset>(m, "Dataset")
        .def(py::init(&make_dataset), py::arg("images"), py::arg("labels"), py::arg("classes") = 10)
        .def_property_readonly("images", [](const Dataset& d) { return to_array(d.images); })
        .def_readonly("labels", &Dataset::labels)
        .def_readonly("classes", &Dataset::classes)
        .def_readonly("split", &Dataset::split)
        .def("head", &Dataset::head)
        .def("__len__", &Dataset::size);

    m.def(
        "gen_synthetic",
        [](const std::string& split, std::size_t per_class, double noise, std::size_t jitter, double amplitude,
           double background, std::uint64_t seed) {
            SyntheticSpec s;
            s.per_class = per_class;
            s.noise = noise;
            s.jitter = jitter;
            s.amplitude = amplitude;
            s.background = background;
            s.seed = seed;
            return gen_synthetic(s, split);
        },
        py::arg("split") = "train", py::arg("per_class") = 200, py::arg("noise") = 0.2, py::arg("jitter") = 1,
        py::arg("amplitude") = 0.3, py::arg("background") = 0.35, py::arg("seed") = 1,
        "Glyph dataset with 10 classes of 1x16x16 images.");
    m.def("load_idx", &load_idx, py::arg("images"), py::arg("labels"), py::arg("classes") = 0);
    m.def("write_idx", &write_idx, py::arg("data"), py::arg("images"), py::arg("labels"));

    py::class_<AttackSpec>(m, "AttackSpec")
        .def(py::init<>())
        .def_readwrite("epsilon", &AttackSpec::epsilon)
        .def_readwrite("steps", &AttackSpec::steps)
        .def_readwrite("step_size", &AttackSpec::step_size)
        .def_readwrite("momentum", &AttackSpec::momentum)
        .def_readwrite("restarts", &AttackSpec::restarts)
        .def_readwrite("loss", &AttackSpec::loss);

    py::class_<DistillSpec>(m, "DistillSpec")
        .def(py::init<>())
        .def_static("with_epsilon", &DistillSpec::with_epsilon, py::arg("epsilon"), py::arg("layer") = 1)
        .def_readwrite("epsilon", &DistillSpec::epsilon)
        .def_readwrite("steps", &DistillSpec::steps)
        .def_readwrite("step_size", &DistillSpec::step_size)
        .def_readwrite("momentum", &DistillSpec::momentum)
        .def_readwrite("layer", &DistillSpec::layer);

    py::class_<Ensemble>(m, "Ensemble")
        .def_static(
            "build",
            [](Architecture arch, std::size_t n, std::uint64_t seed, Activation act, std::size_t width) {
                ModelSpec s;
                s.arch = arch;
                s.seed = seed;
                s.activation = act;
                s.width = width;
                return Ensemble::build(s, n);
            },
            py::arg("arch") = Architecture::CnnSmall, py::arg("n") = 3, py::arg("seed") = 7,
            py::arg("activation") = Activation::Relu, py::arg("width") = 1)
        .def("__len__", &Ensemble::size)
        .def("member_ids",
             [](const Ensemble& e) {
                 std::vector<std::string> ids;
                 for (const auto& m : e.members()) ids.push_back(m.id());
                 return ids;
             })
        .def("tap_count", [](const Ensemble& e, std::size_t i) { return e[i].tap_count(); })
        .def("parameter_count", [](const Ensemble& e, std::size_t i) { return e[i].parameter_count(); })
        .def(
            "predict_proba",
            [](Ensemble& e, const Array& x) { return to_array(ensemble_predict(e, to_tensor(x)).prob); },
            "Mean softmax of the members.")
        .def("predict", [](Ensemble& e, const Array& x) { return ensemble_predict(e, to_tensor(x)).labels; })
        .def("member_logits", [](Ensemble& e, std::size_t i, const Array& x) { return to_array(e[i].forward(to_tensor(x))); })
        .def("save", [](const Ensemble& e, const std::filesystem::path& dir) { save_checkpoint(e, dir); })
        .def_static("load", &load_checkpoint);

    py::class_<TrainPlan>(m, "TrainPlan")
        .def(py::init<>())
        .def_readwrite("mode", &TrainPlan::mode)
        .def_readwrite("n", &TrainPlan::n)
        .def_readwrite("epochs", &TrainPlan::epochs)
        .def_readwrite("pretrain_epochs", &TrainPlan::pretrain_epochs)
        .def_readwrite("batch_size", &TrainPlan::batch_size)
        .def_readwrite("lr", &TrainPlan::lr)
        .def_readwrite("pretrain_lr", &TrainPlan::pretrain_lr)
        .def_readwrite("momentum", &TrainPlan::momentum)
        .def_readwrite("weight_decay", &TrainPlan::weight_decay)
        .def_readwrite("distill", &TrainPlan::distill)
        .def_readwrite("advt", &TrainPlan::advt)
        .def_readwrite("lam", &TrainPlan::lambda)
        .def_readwrite("seed", &TrainPlan::seed)
        .def_readwrite("workers", &TrainPlan::workers);

    m.def(
        "train",
        [](Ensemble& e, const TrainPlan& plan, const Dataset& train, const Dataset* eval) {
            TrainLog log;
            {
                py::gil_scoped_release release;
                log = dverge::train(e, plan, train, eval);
            }
            py::list out;
            for (const auto& r : log.records) out.append(record_dict(r));
            return out;
        },
        py::arg("ensemble"), py::arg("plan"), py::arg("train"), py::arg("eval") = nullptr,
        "Trains in place and returns one dict per epoch.");

    m.def(
        "clean_accuracy", [](Ensemble& e, const Dataset& d) { return clean_accuracy(e, view(d)); }, py::arg("ensemble"),
        py::arg("data"));

    m.def(
        "pgd_attack",
        [](Ensemble& e, std::size_t member, const Array& x, const std::vector<std::size_t>& y, const AttackSpec& spec,
           std::uint64_t seed) {
            return to_array(pgd_attack(e[member], to_tensor(x), y, spec, seed).adversarials);
        },
        py::arg("ensemble"), py::arg("member"), py::arg("x"), py::arg("y"), py::arg("spec"), py::arg("seed") = 0,
        "PGD adversarials against one sub-model, within the spec's L-infinity ball.");

    m.def(
        "distill",
        [](Ensemble& e, std::size_t member, const DistillSpec& spec, const Array& targets,
           const std::vector<std::size_t>& target_labels, const Array& sources,
           const std::vector<std::size_t>& source_labels) {
            DistilledBatch b =
                distill_features(e[member], spec, to_tensor(targets), target_labels, to_tensor(sources), source_labels);
            return py::make_tuple(to_array(b.distilled), b.objective_values);
        },
        py::arg("ensemble"), py::arg("member"), py::arg("spec"), py::arg("targets"), py::arg("target_labels"),
        py::arg("sources"), py::arg("source_labels"), "Returns (distilled images, per-row objective values).");

    m.def(
        "pairwise_diversity",
        [](Ensemble& e, std::size_t i, std::size_t j, const Dataset& d, const DistillSpec& spec, std::size_t samples,
           std::uint64_t seed) {
            return pairwise_diversity(e[i], e[j], view(d), spec, LayerPolicy::uniform(), samples, seed).value;
        },
        py::arg("ensemble"), py::arg("i"), py::arg("j"), py::arg("data"), py::arg("spec"), py::arg("samples") = 100,
        py::arg("seed") = 0);

    m.def(
        "transfer_matrix",
        [](Ensemble& e, const AttackSpec& spec, const Dataset& d, std::size_t samples, std::uint64_t seed,
           std::size_t workers) {
            TransferMatrix tm;
            {
                py::gil_scoped_release release;
                tm = transfer_matrix(e, spec, view(d), samples, seed, workers);
            }
            Array out({tm.n, tm.n});
            std::copy(tm.values.begin(), tm.values.end(), out.mutable_data());
            return out;
        },
        py::arg("ensemble"), py::arg("spec"), py::arg("data"), py::arg("samples") = 100, py::arg("seed") = 0,
        py::arg("workers") = 1, "Entry (i, j): success rate on j of adversarials crafted against i.");

    m.def(
        "whitebox_eval",
        [](Ensemble& e, const std::vector<Scalar>& eps, const Dataset& d, std::size_t steps, std::uint64_t seed) {
            AttackSpec tmpl;
            tmpl.steps = steps;
            py::gil_scoped_release release;
            return whitebox_eval(e, eps, tmpl, view(d), seed);
        },
        py::arg("ensemble"), py::arg("eps"), py::arg("data"), py::arg("steps") = 50, py::arg("seed") = 0);

    m.def(
        "blackbox_eval",
        [](Ensemble& defender, std::vector<Ensemble> surrogates, Scalar eps, const Dataset& d, std::size_t steps,
           std::uint64_t seed) {
            BatterySpec battery;
            battery.steps = steps;
            auto ptrs = pointers(surrogates);
            py::gil_scoped_release release;
            return blackbox_eval(defender, ptrs, eps, battery, view(d), seed);
        },
        py::arg("defender"), py::arg("surrogates"), py::arg("eps"), py::arg("data"), py::arg("steps") = 100,
        py::arg("seed") = 0, "All-or-nothing accuracy under transfer attacks from the surrogate ensembles.");
}
