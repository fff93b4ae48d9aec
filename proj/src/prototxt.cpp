// Copyright 2026 The mtlc Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "mtlc/prototxt.hpp"

#include <cctype>
#include <charconv>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "mtlc/errors.hpp"

namespace mtlc {
namespace {

// --- tokenizer ---

struct Token {
  enum class Kind { kIdent, kString, kNumber, kColon, kOpenBrace, kCloseBrace, kEnd };
  Kind kind;
  std::string text;
  int line;
  int column;
};

class Tokenizer {
 public:
  explicit Tokenizer(std::string_view text) : text_(text) {}

  Token next() {
    skip_space_and_comments();
    const int line = line_, column = column_;
    if (pos_ >= text_.size()) return {Token::Kind::kEnd, "", line, column};
    const char c = text_[pos_];
    if (c == ':') return single(Token::Kind::kColon);
    if (c == '{') return single(Token::Kind::kOpenBrace);
    if (c == '}') return single(Token::Kind::kCloseBrace);
    if (c == '"' || c == '\'') return string_literal(c, line, column);
    if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
      std::string out;
      while (pos_ < text_.size() && (std::isalnum(static_cast<unsigned char>(text_[pos_])) ||
                                     text_[pos_] == '_' || text_[pos_] == '.')) {
        out += advance();
      }
      return {Token::Kind::kIdent, out, line, column};
    }
    if (std::isdigit(static_cast<unsigned char>(c)) || c == '-' || c == '+' || c == '.') {
      std::string out;
      while (pos_ < text_.size() &&
             (std::isalnum(static_cast<unsigned char>(text_[pos_])) || text_[pos_] == '.' ||
              text_[pos_] == '-' || text_[pos_] == '+')) {
        out += advance();
      }
      double ignored = 0.0;
      const char* first = out.data() + (out.front() == '+' ? 1 : 0);
      const auto res = std::from_chars(first, out.data() + out.size(), ignored);
      if (res.ec != std::errc() || res.ptr != out.data() + out.size()) {
        throw SyntaxError(line, column, "number, got '" + out + "'");
      }
      return {Token::Kind::kNumber, out.front() == '+' ? out.substr(1) : out, line, column};
    }
    throw SyntaxError(line, column, "identifier, value, '{' or '}', got '" + std::string(1, c) + "'");
  }

 private:
  char advance() {
    const char c = text_[pos_++];
    if (c == '\n') {
      ++line_;
      column_ = 1;
    } else {
      ++column_;
    }
    return c;
  }

  Token single(Token::Kind kind) {
    const int line = line_, column = column_;
    return {kind, std::string(1, advance()), line, column};
  }

  void skip_space_and_comments() {
    while (pos_ < text_.size()) {
      const char c = text_[pos_];
      if (c == '#') {
        while (pos_ < text_.size() && text_[pos_] != '\n') advance();
      } else if (std::isspace(static_cast<unsigned char>(c)) || c == ',' || c == ';') {
        advance();
      } else {
        break;
      }
    }
  }

  Token string_literal(char quote, int line, int column) {
    advance();
    std::string out;
    while (true) {
      if (pos_ >= text_.size() || text_[pos_] == '\n') {
        throw SyntaxError(line_, column_, "closing quote for string starting at " +
                                              std::to_string(line) + ":" + std::to_string(column));
      }
      char c = advance();
      if (c == quote) break;
      if (c == '\\') {
        if (pos_ >= text_.size()) throw SyntaxError(line_, column_, "escape sequence");
        const char e = advance();
        switch (e) {
          case 'n': c = '\n'; break;
          case 't': c = '\t'; break;
          case '\\': c = '\\'; break;
          case '"': c = '"'; break;
          case '\'': c = '\''; break;
          default: throw SyntaxError(line_, column_ - 1, "known escape sequence");
        }
      }
      out += c;
    }
    return {Token::Kind::kString, out, line, column};
  }

  std::string_view text_;
  std::size_t pos_ = 0;
  int line_ = 1;
  int column_ = 1;
};

// --- generic parser ---

class TextParser {
 public:
  explicit TextParser(std::string_view text) : tokens_(text) { look_ = tokens_.next(); }

  TextMessage document(bool nested) {
    TextMessage msg;
    while (true) {
      if (look_.kind == Token::Kind::kEnd) {
        if (nested) throw SyntaxError(look_.line, look_.column, "'}'");
        return msg;
      }
      if (look_.kind == Token::Kind::kCloseBrace) {
        if (!nested) throw SyntaxError(look_.line, look_.column, "identifier, got '}'");
        return msg;
      }
      if (look_.kind != Token::Kind::kIdent) {
        throw SyntaxError(look_.line, look_.column, "field name, got '" + look_.text + "'");
      }
      TextField field;
      field.name = look_.text;
      field.line = look_.line;
      field.column = look_.column;
      take();
      bool had_colon = false;
      if (look_.kind == Token::Kind::kColon) {
        had_colon = true;
        take();
      }
      if (look_.kind == Token::Kind::kOpenBrace) {
        take();
        field.kind = TextField::Kind::kMessage;
        field.message = std::make_shared<TextMessage>(document(true));
        take();  // '}'
      } else if (!had_colon) {
        throw SyntaxError(look_.line, look_.column, "':' or '{' after '" + field.name + "'");
      } else {
        switch (look_.kind) {
          case Token::Kind::kString: field.kind = TextField::Kind::kString; break;
          case Token::Kind::kNumber: field.kind = TextField::Kind::kNumber; break;
          case Token::Kind::kIdent: field.kind = TextField::Kind::kIdent; break;
          default:
            throw SyntaxError(look_.line, look_.column, "value after '" + field.name + ":'");
        }
        field.scalar = look_.text;
        take();
      }
      msg.fields.push_back(std::move(field));
    }
  }

 private:
  void take() { look_ = tokens_.next(); }

  Tokenizer tokens_;
  Token look_;
};

// --- typed field access ---

[[noreturn]] void invalid(const std::string& layer, const std::string& detail) {
  throw InvalidLayer("layer '" + layer + "': " + detail);
}

std::int64_t as_int(const TextField& f, const std::string& layer) {
  if (f.kind != TextField::Kind::kNumber) invalid(layer, f.name + " must be an integer");
  std::int64_t v = 0;
  auto [end, ec] = std::from_chars(f.scalar.data(), f.scalar.data() + f.scalar.size(), v);
  if (ec != std::errc() || end != f.scalar.data() + f.scalar.size()) {
    invalid(layer, f.name + " must be an integer, got " + f.scalar);
  }
  return v;
}

double as_double(const TextField& f, const std::string& layer) {
  if (f.kind != TextField::Kind::kNumber) invalid(layer, f.name + " must be a number");
  double v = 0.0;
  auto [end, ec] = std::from_chars(f.scalar.data(), f.scalar.data() + f.scalar.size(), v);
  if (ec != std::errc() || end != f.scalar.data() + f.scalar.size()) {
    invalid(layer, f.name + " must be a number, got " + f.scalar);
  }
  return v;
}

bool as_bool(const TextField& f, const std::string& layer) {
  if (f.scalar == "true" || f.scalar == "1") return true;
  if (f.scalar == "false" || f.scalar == "0") return false;
  invalid(layer, f.name + " must be true or false");
}

std::string as_string(const TextField& f) { return f.scalar; }

// Repeated scalar that Caffe allows once per spatial axis; we only accept
// square settings.
std::optional<std::int64_t> square_value(const TextMessage& m, std::string_view name,
                                         const std::string& layer) {
  std::optional<std::int64_t> out;
  for (const TextField* f : m.find_all(name)) {
    const std::int64_t v = as_int(*f, layer);
    if (out && *out != v) throw UnsupportedLayer("non-square " + std::string(name) + " in '" + layer + "'");
    out = v;
  }
  return out;
}

Dims parse_shape(const TextMessage& shape, const std::string& layer) {
  Dims dims;
  for (const TextField* f : shape.find_all("dim")) {
    const std::int64_t d = as_int(*f, layer);
    if (d < 1) invalid(layer, "input dims must be positive");
    dims.push_back(static_cast<std::size_t>(d));
  }
  if (dims.empty()) invalid(layer, "shape has no dims");
  return dims;
}

KindParams parse_params(LayerKind kind, const TextMessage& layer, const std::string& name) {
  auto sub = [&](std::string_view field) -> const TextMessage* {
    const TextField* f = layer.find(field);
    return (f && f->kind == TextField::Kind::kMessage) ? f->message.get() : nullptr;
  };
  static const TextMessage kEmpty;
  switch (kind) {
    case LayerKind::kInput: {
      InputParams p;
      if (const TextMessage* m = sub("input_param")) {
        for (const TextField* s : m->find_all("shape")) {
          if (s->kind != TextField::Kind::kMessage) invalid(name, "shape must be a message");
          p.shapes.push_back(parse_shape(*s->message, name));
        }
      }
      return p;
    }
    case LayerKind::kConvolution: {
      const TextMessage& m = sub("convolution_param") ? *sub("convolution_param") : kEmpty;
      ConvolutionParams p;
      if (const TextField* f = m.find("num_output")) p.num_output = as_int(*f, name);
      if (auto k = square_value(m, "kernel_size", name)) p.kernel_size = *k;
      if (const TextField* kh = m.find("kernel_h")) {
        const TextField* kw = m.find("kernel_w");
        if (!kw || as_int(*kh, name) != as_int(*kw, name)) {
          throw UnsupportedLayer("non-square kernel in '" + name + "'");
        }
        p.kernel_size = as_int(*kh, name);
      }
      if (auto s = square_value(m, "stride", name)) p.stride = *s;
      if (auto s = square_value(m, "pad", name)) p.pad = *s;
      if (const TextField* f = m.find("bias_term")) p.bias_term = as_bool(*f, name);
      if (const TextField* f = m.find("group"); f && as_int(*f, name) != 1) {
        throw UnsupportedLayer("Convolution(group=" + f->scalar + ") in '" + name + "'");
      }
      if (auto d = square_value(m, "dilation", name); d && *d != 1) {
        throw UnsupportedLayer("Convolution(dilation=" + std::to_string(*d) + ") in '" + name + "'");
      }
      return p;
    }
    case LayerKind::kBatchNorm: {
      BatchNormParams p;
      if (const TextMessage* m = sub("batch_norm_param")) {
        if (const TextField* f = m->find("eps")) p.eps = as_double(*f, name);
        if (const TextField* f = m->find("moving_average_fraction")) {
          p.moving_average_fraction = as_double(*f, name);
        }
      }
      return p;
    }
    case LayerKind::kReLU: {
      if (const TextMessage* m = sub("relu_param")) {
        if (const TextField* f = m->find("negative_slope"); f && as_double(*f, name) != 0.0) {
          throw UnsupportedLayer("ReLU(negative_slope) in '" + name + "'");
        }
      }
      return ReLUParams{};
    }
    case LayerKind::kPooling: {
      const TextMessage& m = sub("pooling_param") ? *sub("pooling_param") : kEmpty;
      PoolingParams p;
      if (const TextField* f = m.find("pool")) {
        if (f->scalar == "MAX" || f->scalar == "0") {
          p.mode = PoolMode::kMax;
        } else if (f->scalar == "AVE" || f->scalar == "1") {
          p.mode = PoolMode::kAverage;
        } else {
          throw UnsupportedLayer("Pooling(" + f->scalar + ") in '" + name + "'");
        }
      }
      if (auto k = square_value(m, "kernel_size", name)) p.kernel_size = *k;
      if (auto s = square_value(m, "stride", name)) p.stride = *s;
      if (auto s = square_value(m, "pad", name)) p.pad = *s;
      if (const TextField* f = m.find("global_pooling")) p.global_pooling = as_bool(*f, name);
      return p;
    }
    case LayerKind::kInnerProduct: {
      InnerProductParams p;
      if (const TextMessage* m = sub("inner_product_param")) {
        if (const TextField* f = m->find("num_output")) p.num_output = as_int(*f, name);
        if (const TextField* f = m->find("bias_term")) p.bias_term = as_bool(*f, name);
      }
      return p;
    }
    case LayerKind::kEltwise: {
      if (const TextMessage* m = sub("eltwise_param")) {
        if (const TextField* f = m->find("operation"); f && f->scalar != "SUM" && f->scalar != "1") {
          throw UnsupportedLayer("Eltwise(" + f->scalar + ") in '" + name + "'");
        }
        if (m->find("coeff")) throw UnsupportedLayer("Eltwise(coeff) in '" + name + "'");
      }
      return EltwiseParams{};
    }
    case LayerKind::kConcat: {
      if (const TextMessage* m = sub("concat_param")) {
        for (const char* axis_name : {"axis", "concat_dim"}) {
          if (const TextField* f = m->find(axis_name); f && as_int(*f, name) != 1) {
            throw UnsupportedLayer("Concat(" + std::string(axis_name) + "=" + f->scalar +
                                   ") in '" + name + "'");
          }
        }
      }
      return ConcatParams{};
    }
    case LayerKind::kDropout: {
      DropoutParams p;
      if (const TextMessage* m = sub("dropout_param")) {
        if (const TextField* f = m->find("dropout_ratio")) p.ratio = as_double(*f, name);
      }
      return p;
    }
  }
  return ReLUParams{};
}

// Tracks the current SSA name of every tensor while walking layers.
class TensorNames {
 public:
  void declare(const std::string& name) {
    current_[name] = name;
    used_.insert(name);
  }

  std::string resolve(const std::string& name) const {
    auto it = current_.find(name);
    if (it == current_.end()) throw DanglingReference(name);
    return it->second;
  }

  // Returns the SSA name for a fresh write of `name` by `layer`.
  std::string produce(const std::string& name, const std::string& layer) {
    std::string ssa = name;
    if (used_.count(ssa)) {
      ssa = name + "@" + layer;
      for (int n = 2; used_.count(ssa); ++n) ssa = name + "@" + layer + "#" + std::to_string(n);
    }
    used_.insert(ssa);
    current_[name] = ssa;
    return ssa;
  }

 private:
  std::map<std::string, std::string> current_;
  std::set<std::string> used_;
};

NetworkSpec build_spec(const TextMessage& doc) {
  NetworkSpec spec;
  TensorNames names;
  if (const TextField* f = doc.find("name")) spec.name = as_string(*f);

  // Legacy top-level inputs: `input:` with `input_shape {}` or 4x `input_dim:`.
  const auto inputs = doc.find_all("input");
  const auto input_shapes = doc.find_all("input_shape");
  const auto input_dims = doc.find_all("input_dim");
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    InputDecl decl;
    decl.name = as_string(*inputs[i]);
    if (i < input_shapes.size() && input_shapes[i]->kind == TextField::Kind::kMessage) {
      decl.shape = parse_shape(*input_shapes[i]->message, decl.name);
    } else if (input_dims.size() >= 4 * (i + 1)) {
      for (std::size_t d = 4 * i; d < 4 * (i + 1); ++d) {
        decl.shape.push_back(static_cast<std::size_t>(as_int(*input_dims[d], decl.name)));
      }
    } else {
      invalid(decl.name, "top-level input has no shape");
    }
    names.declare(decl.name);
    spec.inputs.push_back(std::move(decl));
  }

  for (const TextField* lf : doc.find_all("layer")) {
    if (lf->kind != TextField::Kind::kMessage) {
      throw SyntaxError(lf->line, lf->column, "'{' after 'layer'");
    }
    const TextMessage& m = *lf->message;
    LayerSpec layer;
    if (const TextField* f = m.find("name")) layer.name = as_string(*f);
    const TextField* type = m.find("type");
    if (!type) {
      throw InvalidLayer("layer at " + std::to_string(lf->line) + ":" +
                         std::to_string(lf->column) + " has no type");
    }
    auto kind = layer_kind_from_string(type->scalar);
    if (!kind) throw UnsupportedLayer(type->scalar);
    layer.kind = *kind;
    layer.params = parse_params(layer.kind, m, layer.name);
    for (const TextField* b : m.find_all("bottom")) layer.bottoms.push_back(names.resolve(as_string(*b)));
    for (const TextField* t : m.find_all("top")) {
      layer.tops.push_back(names.produce(as_string(*t), layer.name));
    }
    spec.layers.push_back(std::move(layer));
  }
  return spec;
}

std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  std::string s = os.str();
  return s;
}

std::string quote(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    if (c == '\n') {
      out += "\\n";
      continue;
    }
    out += c;
  }
  return out + "\"";
}

struct ArityRule {
  std::size_t min_bottoms;
  std::size_t max_bottoms;
  std::size_t min_tops;
  std::size_t max_tops;
};

ArityRule arity(LayerKind kind) {
  constexpr std::size_t kMany = static_cast<std::size_t>(-1);
  switch (kind) {
    case LayerKind::kInput: return {0, 0, 1, kMany};
    case LayerKind::kEltwise:
    case LayerKind::kConcat: return {2, kMany, 1, 1};
    default: return {1, 1, 1, 1};
  }
}

}  // namespace

const TextField* TextMessage::find(std::string_view name) const {
  for (const TextField& f : fields) {
    if (f.name == name) return &f;
  }
  return nullptr;
}

std::vector<const TextField*> TextMessage::find_all(std::string_view name) const {
  std::vector<const TextField*> out;
  for (const TextField& f : fields) {
    if (f.name == name) out.push_back(&f);
  }
  return out;
}

TextMessage parse_text_format(std::string_view text) {
  TextParser parser(text);
  return parser.document(false);
}

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::kInput: return "Input";
    case LayerKind::kConvolution: return "Convolution";
    case LayerKind::kBatchNorm: return "BatchNorm";
    case LayerKind::kReLU: return "ReLU";
    case LayerKind::kPooling: return "Pooling";
    case LayerKind::kInnerProduct: return "InnerProduct";
    case LayerKind::kEltwise: return "Eltwise";
    case LayerKind::kConcat: return "Concat";
    case LayerKind::kDropout: return "Dropout";
  }
  return "?";
}

std::optional<LayerKind> layer_kind_from_string(std::string_view name) {
  for (LayerKind k : {LayerKind::kInput, LayerKind::kConvolution, LayerKind::kBatchNorm,
                      LayerKind::kReLU, LayerKind::kPooling, LayerKind::kInnerProduct,
                      LayerKind::kEltwise, LayerKind::kConcat, LayerKind::kDropout}) {
    if (to_string(k) == name) return k;
  }
  return std::nullopt;
}

KindParams default_params(LayerKind kind) {
  switch (kind) {
    case LayerKind::kInput: return InputParams{};
    case LayerKind::kConvolution: return ConvolutionParams{};
    case LayerKind::kBatchNorm: return BatchNormParams{};
    case LayerKind::kReLU: return ReLUParams{};
    case LayerKind::kPooling: return PoolingParams{};
    case LayerKind::kInnerProduct: return InnerProductParams{};
    case LayerKind::kEltwise: return EltwiseParams{};
    case LayerKind::kConcat: return ConcatParams{};
    case LayerKind::kDropout: return DropoutParams{};
  }
  return ReLUParams{};
}

NetworkSpec parse_network_unchecked(std::string_view text) {
  return build_spec(parse_text_format(text));
}

NetworkSpec parse_network(std::string_view text) {
  NetworkSpec spec = parse_network_unchecked(text);
  const ValidationReport report = validate_spec(spec);
  if (!report.ok()) {
    for (const Finding& f : report.findings) {
      if (!f.warning) {
        throw InvalidLayer("layer '" + f.layer + "': " + to_string(f.kind) + ": " + f.detail);
      }
    }
  }
  return spec;
}

NetworkSpec load_network(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open prototxt file '" + path + "'");
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_network(buffer.str());
}

// --- validation ---

std::string to_string(FindingKind kind) {
  switch (kind) {
    case FindingKind::kDuplicateName: return "DuplicateName";
    case FindingKind::kDuplicateTop: return "DuplicateTop";
    case FindingKind::kArityMismatch: return "ArityMismatch";
    case FindingKind::kMissingParam: return "MissingParam";
    case FindingKind::kInvalidParam: return "InvalidParam";
    case FindingKind::kDanglingReference: return "DanglingReference";
    case FindingKind::kUnreferencedTop: return "UnreferencedTop";
  }
  return "?";
}

bool ValidationReport::ok() const {
  for (const Finding& f : findings) {
    if (!f.warning) return false;
  }
  return true;
}

std::size_t ValidationReport::count(FindingKind kind) const {
  std::size_t n = 0;
  for (const Finding& f : findings) n += f.kind == kind;
  return n;
}

ValidationReport validate_spec(const NetworkSpec& spec) {
  ValidationReport report;
  auto error = [&](FindingKind k, const std::string& layer, std::string detail) {
    report.findings.push_back({k, layer, std::move(detail), false});
  };

  std::set<std::string> layer_names;
  std::set<std::string> produced;
  std::map<std::string, std::string> producer;  // tensor -> layer (or "" for inputs)
  std::set<std::string> consumed;
  for (const InputDecl& in : spec.inputs) {
    if (!produced.insert(in.name).second) error(FindingKind::kDuplicateTop, in.name, "input declared twice");
    producer[in.name] = "";
  }

  for (const LayerSpec& layer : spec.layers) {
    if (!layer_names.insert(layer.name).second) {
      error(FindingKind::kDuplicateName, layer.name, "layer name used more than once");
    }
    const ArityRule rule = arity(layer.kind);
    if (layer.bottoms.size() < rule.min_bottoms || layer.bottoms.size() > rule.max_bottoms ||
        layer.tops.size() < rule.min_tops || layer.tops.size() > rule.max_tops) {
      error(FindingKind::kArityMismatch, layer.name,
            to_string(layer.kind) + " with " + std::to_string(layer.bottoms.size()) +
                " bottoms and " + std::to_string(layer.tops.size()) + " tops");
    }
    for (const std::string& b : layer.bottoms) {
      if (!produced.count(b)) {
        error(FindingKind::kDanglingReference, layer.name, "bottom '" + b + "' not produced earlier");
      }
      consumed.insert(b);
    }
    for (const std::string& t : layer.tops) {
      if (!produced.insert(t).second) {
        error(FindingKind::kDuplicateTop, layer.name, "tensor '" + t + "' produced twice");
      }
      producer[t] = layer.name;
    }

    std::visit(
        [&](const auto& p) {
          using P = std::decay_t<decltype(p)>;
          if constexpr (std::is_same_v<P, InputParams>) {
            // Shapes may be omitted and supplied at shape inference instead.
            if (!p.shapes.empty() && p.shapes.size() != layer.tops.size()) {
              error(FindingKind::kInvalidParam, layer.name, "Input needs one shape per top");
            }
          } else if constexpr (std::is_same_v<P, ConvolutionParams>) {
            if (p.num_output < 1) error(FindingKind::kMissingParam, layer.name, "num_output >= 1 required");
            if (p.kernel_size < 1) error(FindingKind::kMissingParam, layer.name, "kernel_size >= 1 required");
            if (p.stride < 1) error(FindingKind::kInvalidParam, layer.name, "stride must be >= 1");
            if (p.pad < 0) error(FindingKind::kInvalidParam, layer.name, "pad must be >= 0");
          } else if constexpr (std::is_same_v<P, PoolingParams>) {
            if (!p.global_pooling && p.kernel_size < 1) {
              error(FindingKind::kMissingParam, layer.name, "kernel_size >= 1 required");
            }
            if (p.stride < 1) error(FindingKind::kInvalidParam, layer.name, "stride must be >= 1");
            if (p.pad < 0) error(FindingKind::kInvalidParam, layer.name, "pad must be >= 0");
          } else if constexpr (std::is_same_v<P, InnerProductParams>) {
            if (p.num_output < 1) error(FindingKind::kMissingParam, layer.name, "num_output >= 1 required");
          } else if constexpr (std::is_same_v<P, DropoutParams>) {
            if (!(p.ratio >= 0.0 && p.ratio < 1.0)) {
              error(FindingKind::kInvalidParam, layer.name, "dropout_ratio must lie in [0, 1)");
            }
          } else if constexpr (std::is_same_v<P, BatchNormParams>) {
            if (!(p.eps > 0.0)) error(FindingKind::kInvalidParam, layer.name, "eps must be > 0");
          }
        },
        layer.params);
    const bool params_match = layer.params.index() == default_params(layer.kind).index();
    if (!params_match) {
      error(FindingKind::kInvalidParam, layer.name, "params do not match kind " + to_string(layer.kind));
    }
  }

  // Tensors nobody reads are legal (network outputs) but worth flagging when
  // they are not the final output.
  const std::string last_top =
      spec.layers.empty() || spec.layers.back().tops.empty() ? "" : spec.layers.back().tops.back();
  for (const auto& [tensor, layer] : producer) {
    if (!consumed.count(tensor) && tensor != last_top) {
      report.findings.push_back({FindingKind::kUnreferencedTop, layer.empty() ? tensor : layer,
                                 "tensor '" + tensor + "' is never consumed", true});
    }
  }
  return report;
}

// --- output ---

std::string print_network(const NetworkSpec& spec) {
  std::ostringstream os;
  if (!spec.name.empty()) os << "name: " << quote(spec.name) << "\n";
  for (const InputDecl& in : spec.inputs) {
    os << "input: " << quote(in.name) << "\ninput_shape {";
    for (std::size_t d : in.shape) os << " dim: " << d;
    os << " }\n";
  }
  for (const LayerSpec& layer : spec.layers) {
    os << "layer {\n  name: " << quote(layer.name) << "\n  type: " << quote(to_string(layer.kind)) << "\n";
    for (const auto& b : layer.bottoms) os << "  bottom: " << quote(b) << "\n";
    for (const auto& t : layer.tops) os << "  top: " << quote(t) << "\n";
    std::visit(
        [&](const auto& p) {
          using P = std::decay_t<decltype(p)>;
          if constexpr (std::is_same_v<P, InputParams>) {
            os << "  input_param {\n";
            for (const Dims& s : p.shapes) {
              os << "    shape {";
              for (std::size_t d : s) os << " dim: " << d;
              os << " }\n";
            }
            os << "  }\n";
          } else if constexpr (std::is_same_v<P, ConvolutionParams>) {
            os << "  convolution_param {\n    num_output: " << p.num_output
               << "\n    kernel_size: " << p.kernel_size << "\n    stride: " << p.stride
               << "\n    pad: " << p.pad << "\n    bias_term: " << (p.bias_term ? "true" : "false")
               << "\n  }\n";
          } else if constexpr (std::is_same_v<P, BatchNormParams>) {
            os << "  batch_norm_param {\n    eps: " << fmt_double(p.eps)
               << "\n    moving_average_fraction: " << fmt_double(p.moving_average_fraction)
               << "\n  }\n";
          } else if constexpr (std::is_same_v<P, PoolingParams>) {
            os << "  pooling_param {\n    pool: " << (p.mode == PoolMode::kMax ? "MAX" : "AVE");
            if (p.global_pooling) {
              os << "\n    global_pooling: true";
            } else {
              os << "\n    kernel_size: " << p.kernel_size;
            }
            os << "\n    stride: " << p.stride << "\n    pad: " << p.pad << "\n  }\n";
          } else if constexpr (std::is_same_v<P, InnerProductParams>) {
            os << "  inner_product_param {\n    num_output: " << p.num_output
               << "\n    bias_term: " << (p.bias_term ? "true" : "false") << "\n  }\n";
          } else if constexpr (std::is_same_v<P, EltwiseParams>) {
            os << "  eltwise_param {\n    operation: SUM\n  }\n";
          } else if constexpr (std::is_same_v<P, DropoutParams>) {
            os << "  dropout_param {\n    dropout_ratio: " << fmt_double(p.ratio) << "\n  }\n";
          }
        },
        layer.params);
    os << "}\n";
  }
  return os.str();
}

nlohmann::json to_json(const NetworkSpec& spec) {
  using nlohmann::json;
  json layers = json::array();
  for (const LayerSpec& layer : spec.layers) {
    json params = json::object();
    std::visit(
        [&](const auto& p) {
          using P = std::decay_t<decltype(p)>;
          if constexpr (std::is_same_v<P, InputParams>) {
            params["shapes"] = p.shapes;
          } else if constexpr (std::is_same_v<P, ConvolutionParams>) {
            params = {{"num_output", p.num_output}, {"kernel_size", p.kernel_size},
                      {"stride", p.stride}, {"pad", p.pad}, {"bias_term", p.bias_term}};
          } else if constexpr (std::is_same_v<P, BatchNormParams>) {
            params = {{"eps", p.eps}, {"moving_average_fraction", p.moving_average_fraction}};
          } else if constexpr (std::is_same_v<P, PoolingParams>) {
            params = {{"pool", p.mode == PoolMode::kMax ? "MAX" : "AVE"},
                      {"kernel_size", p.kernel_size}, {"stride", p.stride}, {"pad", p.pad},
                      {"global_pooling", p.global_pooling}};
          } else if constexpr (std::is_same_v<P, InnerProductParams>) {
            params = {{"num_output", p.num_output}, {"bias_term", p.bias_term}};
          } else if constexpr (std::is_same_v<P, EltwiseParams>) {
            params = {{"operation", "SUM"}};
          } else if constexpr (std::is_same_v<P, ConcatParams>) {
            params = {{"axis", 1}};
          } else if constexpr (std::is_same_v<P, DropoutParams>) {
            params = {{"dropout_ratio", p.ratio}};
          }
        },
        layer.params);
    layers.push_back({{"name", layer.name},
                      {"kind", to_string(layer.kind)},
                      {"bottoms", layer.bottoms},
                      {"tops", layer.tops},
                      {"params", params}});
  }
  json inputs = json::array();
  for (const InputDecl& in : spec.inputs) inputs.push_back({{"name", in.name}, {"shape", in.shape}});
  return {{"name", spec.name}, {"inputs", inputs}, {"layers", layers}};
}

}  // namespace mtlc
