#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <optional>

#include "codiff/data.hpp"
#include "codiff/diffusion.hpp"
#include "codiff/metrics.hpp"
#include "codiff/pipeline.hpp"

namespace py = pybind11;
using namespace codiff;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

py::object to_python(const nlohmann::json& j) {
    switch (j.type()) {
        case nlohmann::json::value_t::null:
            return py::none();
        case nlohmann::json::value_t::boolean:
            return py::bool_(j.get<bool>());
        case nlohmann::json::value_t::number_integer:
            return py::int_(j.get<std::int64_t>());
        case nlohmann::json::value_t::number_unsigned:
            return py::int_(j.get<std::uint64_t>());
        case nlohmann::json::value_t::number_float:
            return py::float_(j.get<double>());
        case nlohmann::json::value_t::string:
            return py::str(j.get<std::string>());
        case nlohmann::json::value_t::array: {
            py::list out;
            for (const auto& v : j) out.append(to_python(v));
            return out;
        }
        case nlohmann::json::value_t::object: {
            py::dict out;
            for (const auto& [k, v] : j.items()) out[py::str(k)] = to_python(v);
            return out;
        }
        default:
            throw std::runtime_error("unsupported JSON value");
    }
}

nlohmann::json from_python(const py::handle& obj) {
    // Round trip through the json module keeps the conversion rules in one place.
    const auto text = py::module_::import("json").attr("dumps")(obj).cast<std::string>();
    return nlohmann::json::parse(text);
}

std::vector<double> as_vector(const Array& a) {
    if (a.ndim() != 1) throw std::invalid_argument("expected a 1-D array");
    return {a.data(), a.data() + a.size()};
}

Tensor<double> as_matrix(const Array& a) {
    if (a.ndim() != 2) throw std::invalid_argument("expected a 2-D array");
    const auto rows = static_cast<std::size_t>(a.shape(0)), cols = static_cast<std::size_t>(a.shape(1));
    return Tensor<double>({rows, cols}, std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor<double>& t) {
    Array out({t.shape.at(0), t.shape.at(1)});
    std::copy(t.data.begin(), t.data.end(), out.mutable_data());
    return out;
}

py::dict prediction_row(const pipeline::PredictionRow& r) {
    py::dict d;
    d["drug_id"] = r.drug_id;
    d["target_id"] = r.target_id;
    d["setting"] = r.setting;
    d["y_true"] = r.y_true ? py::object(py::float_(*r.y_true)) : py::object(py::none());
    d["y_hat"] = r.y_hat;
    return d;
}

}  // namespace

PYBIND11_MODULE(_codiff, m) {
    m.doc() = "Latent diffusion drug-target affinity model: data pipeline, training and metrics.";

    m.def("kd_to_pkd", &data::kd_to_pkd, py::arg("kd_nanomolar"), "pK_d = -log10(K_d / 1e9) for K_d in nM.");

    m.def(
        "noise_schedule",
        [](int steps, double beta_start, double beta_end) {
            const auto s = diffusion::build_schedule(steps, beta_start, beta_end);
            py::dict d;
            d["beta"] = s.beta;
            d["alpha_bar"] = s.alpha_bar;
            return d;
        },
        py::arg("steps") = diffusion::kDefaultSteps, py::arg("beta_start") = diffusion::kDefaultBetaStart,
        py::arg("beta_end") = diffusion::kDefaultBetaEnd, "Linear beta schedule; index i holds step i + 1.");

    m.def(
        "forward_noise",
        [](const Array& z0, const std::vector<int>& k, const Array& eps, int steps) {
            const auto s = diffusion::build_schedule(steps);
            return to_array(diffusion::forward_noise(as_matrix(z0), k, as_matrix(eps), s));
        },
        py::arg("z0"), py::arg("k"), py::arg("eps"), py::arg("steps") = diffusion::kDefaultSteps,
        "z_k = sqrt(alpha_bar_k) z0 + sqrt(1 - alpha_bar_k) eps, row by row.");
    m.def(
        "reconstruct_z0",
        [](const Array& zk, const Array& eps_hat, const std::vector<int>& k, int steps) {
            const auto s = diffusion::build_schedule(steps);
            return to_array(diffusion::reconstruct_z0(as_matrix(zk), as_matrix(eps_hat), k, s));
        },
        py::arg("zk"), py::arg("eps_hat"), py::arg("k"), py::arg("steps") = diffusion::kDefaultSteps,
        "One-shot estimate of z0 from z_k and a noise estimate.");

    m.def("mse", [](const Array& y, const Array& p) { return metrics::mse(as_vector(y), as_vector(p)); },
          py::arg("y"), py::arg("y_hat"));
    m.def("mae", [](const Array& y, const Array& p) { return metrics::mae(as_vector(y), as_vector(p)); },
          py::arg("y"), py::arg("y_hat"));
    m.def(
        "concordance_index",
        [](const Array& y, const Array& p) { return metrics::concordance_index(as_vector(y), as_vector(p)); },
        py::arg("y"), py::arg("y_hat"));
    m.def("rm2", [](const Array& y, const Array& p) { return metrics::rm2(as_vector(y), as_vector(p)); },
          py::arg("y"), py::arg("y_hat"));
    m.def(
        "evaluate",
        [](const Array& y, const Array& p, const std::string& setting) {
            return to_python(metrics::evaluate(as_vector(y), as_vector(p), setting).to_json());
        },
        py::arg("y"), py::arg("y_hat"), py::arg("setting") = "all", "MSE, MAE, CI and r_m^2 as a dict.");

    m.def(
        "ingest",
        [](const std::filesystem::path& input, const std::filesystem::path& out_dir, const std::string& dataset,
           bool raw_kd, std::size_t drug_len, std::size_t target_len) {
            return to_python(pipeline::ingest({.input = input,
                                               .dataset = dataset,
                                               .out_dir = out_dir,
                                               .raw_kd = raw_kd,
                                               .drug_len = drug_len,
                                               .target_len = target_len}));
        },
        py::arg("input"), py::arg("out_dir"), py::arg("dataset") = "generic", py::arg("raw_kd") = false,
        py::arg("drug_len") = 0, py::arg("target_len") = 0, "Tokenizes a pair TSV into a dataset directory.");

    m.def(
        "split",
        [](const std::filesystem::path& data_dir, const std::filesystem::path& out_dir, std::uint64_t seed,
           double drug_frac, double target_frac) {
            return to_python(pipeline::split({.data_dir = data_dir,
                                              .seed = seed,
                                              .drug_frac = drug_frac,
                                              .target_frac = target_frac,
                                              .out_dir = out_dir})
                                 .to_json());
        },
        py::arg("data_dir"), py::arg("out_dir"), py::arg("seed") = 0, py::arg("drug_frac") = 0.8,
        py::arg("target_frac") = 0.8, "Cold-start split into train, ud, ut and up.");

    m.def(
        "train",
        [](const py::dict& config) {
            const auto run = training::RunConfig::from_json(from_python(config));
            py::list out;
            for (const auto& s : pipeline::train(run)) {
                py::dict d;
                d["stage"] = s.stage;
                d["epochs_run"] = s.epochs_run;
                d["best_epoch"] = s.best_epoch;
                d["best_selection_mse"] =
                    s.best_selection_mse ? py::object(py::float_(*s.best_selection_mse)) : py::object(py::none());
                out.append(d);
            }
            return out;
        },
        py::arg("config"), "Runs the configured training stages; keys follow the run configuration JSON.");

    m.def(
        "predict",
        [](const std::filesystem::path& data_dir, const std::filesystem::path& checkpoint,
           const std::filesystem::path& out_dir, const std::optional<std::filesystem::path>& input,
           const std::optional<std::filesystem::path>& split_path, const std::string& subset, const std::string& mode,
           std::uint64_t seed, int k_star, int mc_samples, std::size_t batch_size) {
            pipeline::PredictOptions opt{.data_dir = data_dir,
                                         .checkpoint = checkpoint,
                                         .input = input.value_or(std::filesystem::path()),
                                         .split_path = split_path.value_or(std::filesystem::path()),
                                         .subset = subset,
                                         .mode = mode,
                                         .seed = seed,
                                         .k_star = k_star,
                                         .mc_samples = mc_samples,
                                         .batch_size = batch_size,
                                         .out_dir = out_dir};
            py::list out;
            for (const auto& r : pipeline::predict(opt)) out.append(prediction_row(r));
            return out;
        },
        py::arg("data_dir"), py::arg("checkpoint"), py::arg("out_dir"), py::arg("input") = py::none(),
        py::arg("split_path") = py::none(), py::arg("subset") = "all", py::arg("mode") = "var",
        py::arg("seed") = 0, py::arg("k_star") = 0, py::arg("mc_samples") = 1, py::arg("batch_size") = 64,
        "Affinity predictions as a list of dicts; also written to out_dir.");

    m.def(
        "evaluate_model",
        [](const std::filesystem::path& data_dir, const std::filesystem::path& split_path,
           const std::filesystem::path& checkpoint, const std::filesystem::path& out_dir, const std::string& subset,
           const std::string& mode, std::uint64_t seed) {
            return to_python(pipeline::evaluate({.data_dir = data_dir,
                                                 .split_path = split_path,
                                                 .checkpoint = checkpoint,
                                                 .subset = subset,
                                                 .mode = mode,
                                                 .seed = seed,
                                                 .out_dir = out_dir}));
        },
        py::arg("data_dir"), py::arg("split_path"), py::arg("checkpoint"), py::arg("out_dir"),
        py::arg("subset") = "test", py::arg("mode") = "var", py::arg("seed") = 0,
        "Per-setting metrics for a trained checkpoint.");

    m.def(
        "export_embeddings",
        [](const std::filesystem::path& data_dir, const std::filesystem::path& checkpoint,
           const std::filesystem::path& out_dir) {
            pipeline::export_embeddings({.data_dir = data_dir, .checkpoint = checkpoint, .out_dir = out_dir});
        },
        py::arg("data_dir"), py::arg("checkpoint"), py::arg("out_dir"));

    m.def(
        "report",
        [](const std::filesystem::path& out_dir, const std::vector<std::filesystem::path>& evals,
           const std::vector<std::filesystem::path>& predictions, int decimals) {
            pipeline::report({.evals = evals, .predictions = predictions, .decimals = decimals, .out_dir = out_dir});
        },
        py::arg("out_dir"), py::arg("evals") = std::vector<std::filesystem::path>{},
        py::arg("predictions") = std::vector<std::filesystem::path>{}, py::arg("decimals") = 3,
        "Writes scatter.csv and summary.csv.");
}
