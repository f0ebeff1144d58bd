#ifndef GLOSS_ARCH_HPP
#define GLOSS_ARCH_HPP

// Compact architecture strings: hyphen-separated B(n,k,s), C(n,k,s), P(p,q).
//   B(n,k,s)  convolution with n filters of size k, stride s, then bnorm(n)
//   C(n,k,s)  bare convolution
//   P(p,q)    p x p max pooling with stride q
// B and C are followed by a ReLU except on the final layer of an embedding
// or similarity tower.

#include <cctype>
#include <cstddef>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "gloss/errors.hpp"

namespace gloss {

enum class LayerKind { Block, Conv, Pool };

struct LayerDescriptor {
  LayerKind kind = LayerKind::Conv;
  std::size_t filters = 0;  // Block / Conv
  std::size_t kernel = 0;   // pool size p for Pool
  std::size_t stride = 1;   // pool stride q for Pool
  bool final = false;       // suppresses the trailing ReLU

  bool has_params() const noexcept { return kind != LayerKind::Pool; }
  friend bool operator==(const LayerDescriptor&, const LayerDescriptor&) = default;
};

struct FeatureShape {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t volume() const noexcept { return channels * height * width; }
  friend bool operator==(const FeatureShape&, const FeatureShape&) = default;
};

inline std::string to_string(const FeatureShape& s) {
  return std::to_string(s.channels) + "x" + std::to_string(s.height) + "x" +
         std::to_string(s.width);
}

/// What a tower emits: a unit-norm embedding, one similarity score, or raw
/// feature maps consumed by another tower.
enum class OutputKind { Embedding, Similarity, Features };

inline std::string to_string(OutputKind k) {
  switch (k) {
    case OutputKind::Embedding: return "embedding";
    case OutputKind::Similarity: return "similarity";
    case OutputKind::Features: return "features";
  }
  return "?";
}

struct ArchSpec {
  std::vector<LayerDescriptor> layers;
  FeatureShape input;
  OutputKind output = OutputKind::Embedding;

  /// A 1x1 input is a feature vector; convolutions on it act as dense maps
  /// over all channels whatever their nominal kernel size.
  bool point_input() const noexcept { return input.height == 1 && input.width == 1; }

  std::size_t effective_kernel(const LayerDescriptor& l) const noexcept {
    return l.kind != LayerKind::Pool && point_input() ? 1 : l.kernel;
  }
};

struct ParseOptions {
  std::optional<OutputKind> output;  // inferred from the last layer when unset
  /// Reads a 95-filter layer as 96 filters.
  bool correct_filter_typo = false;
};

inline std::string render_layer(const LayerDescriptor& l) {
  std::ostringstream os;
  switch (l.kind) {
    case LayerKind::Block: os << "B(" << l.filters << ',' << l.kernel << ',' << l.stride << ')'; break;
    case LayerKind::Conv: os << "C(" << l.filters << ',' << l.kernel << ',' << l.stride << ')'; break;
    case LayerKind::Pool: os << "P(" << l.kernel << ',' << l.stride << ')'; break;
  }
  return os.str();
}

/// Canonical string form: no whitespace, hyphen separated.
inline std::string render(const ArchSpec& spec) {
  std::string out;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    if (i) out += '-';
    out += render_layer(spec.layers[i]);
  }
  return out;
}

/// Output shape after each layer. Throws DimensionError naming the layer when
/// a spatial extent would drop below one.
inline std::vector<FeatureShape> propagate_shapes(const ArchSpec& spec, FeatureShape input) {
  if (input.channels == 0 || input.height == 0 || input.width == 0) {
    throw DimensionError("input shape " + to_string(input) + " has a zero extent");
  }
  ArchSpec probe = spec;
  probe.input = input;
  std::vector<FeatureShape> shapes;
  FeatureShape cur = input;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& l = spec.layers[i];
    const std::size_t k = probe.effective_kernel(l);
    if (k == 0 || l.stride == 0 || (l.has_params() && l.filters == 0)) {
      throw DimensionError("layer " + std::to_string(i + 1) + " " + render_layer(l) +
                           " has a zero size");
    }
    if (cur.height < k || cur.width < k) {
      throw DimensionError("layer " + std::to_string(i + 1) + " " + render_layer(l) +
                           " does not fit its " + to_string(cur) + " input");
    }
    FeatureShape next;
    next.channels = l.has_params() ? l.filters : cur.channels;
    next.height = (cur.height - k) / l.stride + 1;
    next.width = (cur.width - k) / l.stride + 1;
    shapes.push_back(next);
    cur = next;
  }
  return shapes;
}

inline std::vector<FeatureShape> propagate_shapes(const ArchSpec& spec) {
  return propagate_shapes(spec, spec.input);
}

namespace detail {

inline std::string trim(std::string_view s) {
  std::string out;
  for (char ch : s) {
    if (!std::isspace(static_cast<unsigned char>(ch))) out += ch;
  }
  return out;
}

inline std::size_t parse_positive(const std::string& arg, int token, int index,
                                  const std::string& tok_text) {
  bool ok = !arg.empty() && arg.size() <= 9;
  for (char ch : arg) ok = ok && std::isdigit(static_cast<unsigned char>(ch));
  const std::size_t v = ok ? std::stoul(arg) : 0;
  if (!ok || v == 0) {
    throw ParseError("token " + std::to_string(token) + " '" + tok_text + "': argument " +
                         std::to_string(index) + " '" + arg + "' is not a positive integer",
                     token, index);
  }
  return v;
}

}  // namespace detail

/// Parses and validates an architecture string for the given input shape.
inline ArchSpec parse_arch(std::string_view text, FeatureShape input,
                           const ParseOptions& options = {}) {
  ArchSpec spec;
  spec.input = input;

  // Split on hyphens outside parentheses.
  std::vector<std::string> tokens;
  std::string cur;
  int depth = 0;
  for (char ch : text) {
    if (ch == '(') ++depth;
    if (ch == ')') --depth;
    if (ch == '-' && depth == 0) {
      tokens.push_back(detail::trim(cur));
      cur.clear();
    } else {
      cur += ch;
    }
  }
  tokens.push_back(detail::trim(cur));

  for (std::size_t t = 0; t < tokens.size(); ++t) {
    const int tok = static_cast<int>(t + 1);
    const std::string& s = tokens[t];
    auto fail = [&](const std::string& why) -> void {
      throw ParseError("token " + std::to_string(tok) + " '" + s + "': " + why, tok, 0);
    };
    if (s.empty()) fail("empty layer");
    if (s.size() < 4 || s[1] != '(' || s.back() != ')') fail("expected X(args)");
    LayerDescriptor l;
    switch (s[0]) {
      case 'B': l.kind = LayerKind::Block; break;
      case 'C': l.kind = LayerKind::Conv; break;
      case 'P': l.kind = LayerKind::Pool; break;
      default: fail(std::string("unknown layer type '") + s[0] + "'");
    }
    std::vector<std::string> args;
    std::string inner = s.substr(2, s.size() - 3);
    std::string a;
    for (char ch : inner) {
      if (ch == ',') {
        args.push_back(a);
        a.clear();
      } else {
        a += ch;
      }
    }
    args.push_back(a);
    const std::size_t arity = l.kind == LayerKind::Pool ? 2 : 3;
    if (args.size() != arity) {
      fail("expected " + std::to_string(arity) + " arguments, got " + std::to_string(args.size()));
    }
    std::vector<std::size_t> v;
    for (std::size_t i = 0; i < args.size(); ++i) {
      v.push_back(detail::parse_positive(args[i], tok, static_cast<int>(i + 1), s));
    }
    if (l.kind == LayerKind::Pool) {
      l.kernel = v[0];
      l.stride = v[1];
    } else {
      l.filters = v[0] == 95 && options.correct_filter_typo ? 96 : v[0];
      l.kernel = v[1];
      l.stride = v[2];
    }
    spec.layers.push_back(l);
  }

  const auto& last = spec.layers.back();
  spec.output = options.output.value_or(
      last.kind == LayerKind::Conv && last.filters == 1 ? OutputKind::Similarity
                                                        : OutputKind::Embedding);
  const int last_tok = static_cast<int>(spec.layers.size());
  if (spec.output != OutputKind::Features) {
    if (last.kind == LayerKind::Pool) {
      throw ParseError("a tower cannot end in a pooling layer", last_tok, 0);
    }
    spec.layers.back().final = true;
  }

  std::vector<FeatureShape> shapes;
  try {
    shapes = propagate_shapes(spec);
  } catch (const DimensionError& e) {
    // Recover which token failed from the message-independent walk.
    int bad = 1;
    FeatureShape cur = input;
    for (std::size_t i = 0; i < spec.layers.size(); ++i, ++bad) {
      const std::size_t k = spec.effective_kernel(spec.layers[i]);
      if (cur.height < k || cur.width < k) break;
      cur = {spec.layers[i].has_params() ? spec.layers[i].filters : cur.channels,
             (cur.height - k) / spec.layers[i].stride + 1,
             (cur.width - k) / spec.layers[i].stride + 1};
    }
    throw ParseError(std::string("shape underflow: ") + e.what(), bad, 0);
  }
  if (spec.output == OutputKind::Similarity) {
    const auto& out = shapes.back();
    if (last.kind != LayerKind::Conv || last.filters != 1 || out.height != 1 || out.width != 1) {
      throw ParseError("a similarity tower must end in a scalar C(1,k,s) output, got " +
                           to_string(out),
                       last_tok, 0);
    }
  }
  return spec;
}

/// Reference architectures and their native inputs.
namespace arch {
inline constexpr const char* kTripletTower =
    "B(96,7,3)-P(2,2)-B(192,5,1)-P(2,2)-B(256,3,1)-B(256,1,1)-B(256,1,1)";
inline constexpr const char* kSiameseTower =
    "B(96,7,3)-P(2,2)-B(192,5,1)-P(2,2)-B(256,3,1)-B(256,1,1)-C(1,1,1)";
inline constexpr const char* kCentralSurroundStream =
    "B(95,5,1)-P(2,2)-B(96,3,1)-P(2,2)-B(192,3,1)-B(192,3,1)";
inline constexpr const char* kCentralSurroundFusion = "B(768,2,1)-C(1,1,1)";
inline constexpr const char* kToyTower = "B(256,2,1)-B(512,1,1)-C(128,1,1)";
}  // namespace arch

}  // namespace gloss

#endif  // GLOSS_ARCH_HPP
