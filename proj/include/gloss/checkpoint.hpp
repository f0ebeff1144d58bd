#ifndef GLOSS_CHECKPOINT_HPP
#define GLOSS_CHECKPOINT_HPP

// JSON checkpoint container: architecture strings, every parameter tensor with
// its shape, and the batch-norm running statistics. Loading re-parses the
// architectures and checks every tensor shape against them.

#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "gloss/arch.hpp"
#include "gloss/errors.hpp"
#include "gloss/model.hpp"

namespace gloss {

inline constexpr int kCheckpointVersion = 1;

namespace detail {

template <class T>
nlohmann::json tensor_to_json(const Tensor<T>& t) {
  nlohmann::json j;
  j["shape"] = t.shape();
  std::vector<double> data(t.vec().begin(), t.vec().end());
  j["data"] = std::move(data);
  return j;
}

template <class T>
Tensor<T> tensor_from_json(const nlohmann::json& j, const Tensor<T>& like, const std::string& what) {
  const Shape shape = j.at("shape").get<Shape>();
  if (shape != like.shape()) {
    throw IngestionError("checkpoint: " + what + " has shape " + shape_str(shape) +
                         ", architecture expects " + shape_str(like.shape()));
  }
  const auto data = j.at("data").get<std::vector<double>>();
  std::vector<T> values(data.begin(), data.end());
  return Tensor<T>(shape, std::move(values));
}

inline OutputKind parse_output_kind(const std::string& s) {
  for (auto k : {OutputKind::Embedding, OutputKind::Similarity, OutputKind::Features}) {
    if (to_string(k) == s) return k;
  }
  throw IngestionError("checkpoint: unknown output kind '" + s + "'");
}

}  // namespace detail

template <class T>
nlohmann::json checkpoint_to_json(const Network<T>& net, const nlohmann::json& meta = {}) {
  nlohmann::json j;
  j["format"] = "gloss-checkpoint";
  j["version"] = kCheckpointVersion;
  j["kind"] = to_string(net.kind());
  j["meta"] = meta.is_null() ? nlohmann::json::object() : meta;
  auto& groups = j["groups"] = nlohmann::json::array();
  for (const auto& g : net.groups()) {
    nlohmann::json gj;
    gj["name"] = g.name;
    gj["arch"] = render(g.spec);
    gj["input"] = {g.spec.input.channels, g.spec.input.height, g.spec.input.width};
    gj["output"] = to_string(g.spec.output);
    auto& layers = gj["layers"] = nlohmann::json::array();
    for (const auto& lp : g.params.layers) {
      nlohmann::json lj;
      lj["weights"] = detail::tensor_to_json(lp.weights);
      lj["biases"] = detail::tensor_to_json(lp.biases);
      if (lp.has_bnorm()) {
        lj["bn_gain"] = detail::tensor_to_json(lp.bn_gain);
        lj["bn_bias"] = detail::tensor_to_json(lp.bn_bias);
        lj["bn_running_mean"] = detail::tensor_to_json(lp.bn_running_mean);
        lj["bn_running_var"] = detail::tensor_to_json(lp.bn_running_var);
        lj["running_ready"] = lp.running_ready;
      }
      layers.push_back(std::move(lj));
    }
    groups.push_back(std::move(gj));
  }
  return j;
}

template <class T>
Network<T> checkpoint_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format") != "gloss-checkpoint") throw IngestionError("checkpoint: wrong format tag");
    if (j.at("version").get<int>() != kCheckpointVersion) {
      throw IngestionError("checkpoint: unsupported version " + j.at("version").dump());
    }
    const NetworkKind kind = parse_network_kind(j.at("kind").get<std::string>());
    std::vector<ParamGroup<T>> groups;
    std::mt19937_64 rng(0);
    for (const auto& gj : j.at("groups")) {
      const auto in = gj.at("input").get<std::vector<std::size_t>>();
      if (in.size() != 3) throw IngestionError("checkpoint: input shape needs 3 extents");
      ParseOptions opts;
      opts.output = detail::parse_output_kind(gj.at("output").get<std::string>());
      ArchSpec spec;
      try {
        spec = parse_arch(gj.at("arch").get<std::string>(), {in[0], in[1], in[2]}, opts);
      } catch (const ParseError& e) {
        throw IngestionError(std::string("checkpoint: ") + e.what());
      }
      ParamGroup<T> g{gj.at("name").get<std::string>(), spec, init_tower_params<T>(spec, rng)};
      const auto& lj = gj.at("layers");
      if (lj.size() != g.params.layers.size()) {
        throw IngestionError("checkpoint: group '" + g.name + "' has " +
                             std::to_string(lj.size()) + " layers, architecture needs " +
                             std::to_string(g.params.layers.size()));
      }
      for (std::size_t l = 0; l < lj.size(); ++l) {
        auto& lp = g.params.layers[l];
        const std::string where = g.name + " layer " + std::to_string(l);
        lp.weights = detail::tensor_from_json(lj[l].at("weights"), lp.weights, where + " weights");
        lp.biases = detail::tensor_from_json(lj[l].at("biases"), lp.biases, where + " biases");
        if (lp.has_bnorm()) {
          lp.bn_gain = detail::tensor_from_json(lj[l].at("bn_gain"), lp.bn_gain, where + " gain");
          lp.bn_bias = detail::tensor_from_json(lj[l].at("bn_bias"), lp.bn_bias, where + " bias");
          lp.bn_running_mean = detail::tensor_from_json(lj[l].at("bn_running_mean"),
                                                        lp.bn_running_mean, where + " mean");
          lp.bn_running_var = detail::tensor_from_json(lj[l].at("bn_running_var"),
                                                       lp.bn_running_var, where + " var");
          lp.running_ready = lj[l].at("running_ready").get<bool>();
        }
      }
      groups.push_back(std::move(g));
    }
    return Network<T>(kind, std::move(groups));
  } catch (const nlohmann::json::exception& e) {
    throw IngestionError(std::string("checkpoint: malformed JSON: ") + e.what());
  } catch (const ConfigError& e) {
    throw IngestionError(std::string("checkpoint: ") + e.what());
  }
}

template <class T>
void save_checkpoint(const Network<T>& net, const std::string& path,
                     const nlohmann::json& meta = {}) {
  std::ofstream os(path);
  if (!os) throw IngestionError("cannot write checkpoint " + path);
  os << checkpoint_to_json(net, meta).dump();
  if (!os) throw IngestionError("failed writing checkpoint " + path);
}

template <class T>
Network<T> load_checkpoint(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IngestionError("cannot open checkpoint " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IngestionError("checkpoint " + path + ": " + e.what());
  }
  return checkpoint_from_json<T>(j);
}

}  // namespace gloss

#endif  // GLOSS_CHECKPOINT_HPP
