#pragma once

// Minimal ONNX model representation with a hand-rolled protobuf wire
// encoder/decoder. Only the message fields the exporter emits are modelled;
// unknown fields are skipped on read.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mmfuse/errors.hpp"
#include "mmfuse/tensor.hpp"

namespace mmfuse::onnx {

enum class DType : std::int32_t { Float = 1, Int64 = 7 };

inline const char* dtype_name(DType t) { return t == DType::Float ? "float32" : "int64"; }

struct TensorData {
  std::string name;
  DType dtype = DType::Float;
  std::vector<std::int64_t> dims;
  std::vector<float> floats;
  std::vector<std::int64_t> ints;

  std::size_t count() const {
    std::size_t n = 1;
    for (auto d : dims) n *= static_cast<std::size_t>(d);
    return n;
  }
};

struct Attribute {
  enum Kind : std::int32_t { Float = 1, Int = 2, String = 3, Tensor = 4, Floats = 6, Ints = 7 };
  std::string name;
  Kind kind = Int;
  float f = 0.f;
  std::int64_t i = 0;
  std::string s;
  std::vector<float> floats;
  std::vector<std::int64_t> ints;

  static Attribute make_int(std::string n, std::int64_t v) {
    Attribute a;
    a.name = std::move(n);
    a.kind = Int;
    a.i = v;
    return a;
  }
  static Attribute make_float(std::string n, float v) {
    Attribute a;
    a.name = std::move(n);
    a.kind = Float;
    a.f = v;
    return a;
  }
  static Attribute make_ints(std::string n, std::vector<std::int64_t> v) {
    Attribute a;
    a.name = std::move(n);
    a.kind = Ints;
    a.ints = std::move(v);
    return a;
  }
};

struct NodeDef {
  std::string name;
  std::string op_type;
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  std::vector<Attribute> attributes;

  const Attribute* attr(std::string_view n) const {
    for (const auto& a : attributes)
      if (a.name == n) return &a;
    return nullptr;
  }
  std::int64_t attr_int(std::string_view n, std::int64_t fallback) const {
    const auto* a = attr(n);
    return a ? a->i : fallback;
  }
  float attr_float(std::string_view n, float fallback) const {
    const auto* a = attr(n);
    return a ? a->f : fallback;
  }
  std::vector<std::int64_t> attr_ints(std::string_view n) const {
    const auto* a = attr(n);
    return a ? a->ints : std::vector<std::int64_t>{};
  }
};

/// A dimension is either fixed (value >= 0) or symbolic (param non-empty).
struct Dim {
  std::int64_t value = -1;
  std::string param;
};

struct ValueInfo {
  std::string name;
  DType dtype = DType::Float;
  std::vector<Dim> shape;
};

struct Graph {
  std::string name;
  std::vector<NodeDef> nodes;
  std::vector<TensorData> initializers;
  std::vector<ValueInfo> inputs;
  std::vector<ValueInfo> outputs;
};

struct Model {
  std::int64_t ir_version = 8;
  std::int64_t opset = 13;
  std::string producer_name = "mmfuse";
  std::string producer_version;
  Graph graph;
  std::vector<std::pair<std::string, std::string>> metadata;
};

// ------------------------------------------------------------ wire writer

namespace wire {

class Writer {
 public:
  void varint(std::uint64_t v) {
    while (v >= 0x80) {
      buf_.push_back(static_cast<char>((v & 0x7F) | 0x80));
      v >>= 7;
    }
    buf_.push_back(static_cast<char>(v));
  }
  void tag(std::uint32_t field, std::uint32_t wt) { varint((static_cast<std::uint64_t>(field) << 3) | wt); }
  void int_field(std::uint32_t field, std::int64_t v) {
    tag(field, 0);
    varint(static_cast<std::uint64_t>(v));
  }
  void bytes_field(std::uint32_t field, std::string_view b) {
    tag(field, 2);
    varint(b.size());
    buf_.append(b);
  }
  void float_field(std::uint32_t field, float f) {
    tag(field, 5);
    const auto u = std::bit_cast<std::uint32_t>(f);
    for (int k = 0; k < 4; ++k) buf_.push_back(static_cast<char>((u >> (8 * k)) & 0xFF));
  }
  void message_field(std::uint32_t field, const Writer& w) { bytes_field(field, w.buf_); }
  const std::string& str() const { return buf_; }

 private:
  std::string buf_;
};

struct Field {
  std::uint32_t number = 0;
  std::uint32_t wire_type = 0;
  std::uint64_t varint = 0;
  std::string_view bytes;
  std::uint32_t fixed32 = 0;
};

class Reader {
 public:
  explicit Reader(std::string_view data) : data_(data) {}
  bool done() const { return pos_ >= data_.size(); }

  Field next() {
    Field f;
    const std::uint64_t key = read_varint();
    f.number = static_cast<std::uint32_t>(key >> 3);
    f.wire_type = static_cast<std::uint32_t>(key & 7);
    if (f.number == 0) throw FormatError("protobuf: field number 0");
    switch (f.wire_type) {
      case 0:
        f.varint = read_varint();
        break;
      case 1:
        need(8);
        pos_ += 8;
        break;
      case 2: {
        const std::uint64_t len = read_varint();
        if (len > data_.size() - pos_) throw FormatError("protobuf: length-delimited field overruns buffer");
        f.bytes = data_.substr(pos_, static_cast<std::size_t>(len));
        pos_ += static_cast<std::size_t>(len);
        break;
      }
      case 5:
        need(4);
        for (int k = 0; k < 4; ++k) f.fixed32 |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_ + k])) << (8 * k);
        pos_ += 4;
        break;
      default:
        throw FormatError("protobuf: unsupported wire type " + std::to_string(f.wire_type));
    }
    return f;
  }

  std::uint64_t read_varint() {
    std::uint64_t v = 0;
    for (int shift = 0; shift < 64; shift += 7) {
      need(1);
      const auto b = static_cast<unsigned char>(data_[pos_++]);
      v |= static_cast<std::uint64_t>(b & 0x7F) << shift;
      if (!(b & 0x80)) return v;
    }
    throw FormatError("protobuf: varint too long");
  }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) throw FormatError("protobuf: truncated message");
  }
  std::string_view data_;
  std::size_t pos_ = 0;
};

// Repeated int64 fields may arrive packed or unpacked.
inline void read_int64s(const Field& f, std::vector<std::int64_t>& out) {
  if (f.wire_type == 0) {
    out.push_back(static_cast<std::int64_t>(f.varint));
  } else if (f.wire_type == 2) {
    Reader r(f.bytes);
    while (!r.done()) out.push_back(static_cast<std::int64_t>(r.read_varint()));
  } else {
    throw FormatError("protobuf: bad encoding for repeated int64");
  }
}

inline void read_floats(const Field& f, std::vector<float>& out) {
  if (f.wire_type == 5) {
    out.push_back(std::bit_cast<float>(f.fixed32));
  } else if (f.wire_type == 2) {
    if (f.bytes.size() % 4) throw FormatError("protobuf: packed float length");
    for (std::size_t k = 0; k < f.bytes.size(); k += 4) {
      std::uint32_t u = 0;
      for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(static_cast<unsigned char>(f.bytes[k + b])) << (8 * b);
      out.push_back(std::bit_cast<float>(u));
    }
  } else {
    throw FormatError("protobuf: bad encoding for repeated float");
  }
}

inline std::string to_string(const Field& f) {
  if (f.wire_type != 2) throw FormatError("protobuf: expected length-delimited field " + std::to_string(f.number));
  return std::string(f.bytes);
}

}  // namespace wire

// --------------------------------------------------------------- encoding

namespace detail {

inline wire::Writer encode(const TensorData& t) {
  wire::Writer w;
  for (auto d : t.dims) w.int_field(1, d);
  w.int_field(2, static_cast<std::int32_t>(t.dtype));
  w.bytes_field(8, t.name);
  std::string raw;
  if (t.dtype == DType::Float) {
    raw.resize(t.floats.size() * 4);
    for (std::size_t i = 0; i < t.floats.size(); ++i) {
      const auto u = std::bit_cast<std::uint32_t>(t.floats[i]);
      for (int k = 0; k < 4; ++k) raw[i * 4 + k] = static_cast<char>((u >> (8 * k)) & 0xFF);
    }
  } else {
    raw.resize(t.ints.size() * 8);
    for (std::size_t i = 0; i < t.ints.size(); ++i) {
      const auto u = static_cast<std::uint64_t>(t.ints[i]);
      for (int k = 0; k < 8; ++k) raw[i * 8 + k] = static_cast<char>((u >> (8 * k)) & 0xFF);
    }
  }
  w.bytes_field(9, raw);
  return w;
}

inline wire::Writer encode(const Attribute& a) {
  wire::Writer w;
  w.bytes_field(1, a.name);
  switch (a.kind) {
    case Attribute::Float:
      w.float_field(2, a.f);
      break;
    case Attribute::Int:
      w.int_field(3, a.i);
      break;
    case Attribute::String:
      w.bytes_field(4, a.s);
      break;
    case Attribute::Floats:
      for (float f : a.floats) w.float_field(7, f);
      break;
    case Attribute::Ints:
      for (auto v : a.ints) w.int_field(8, v);
      break;
    default:
      throw FormatError("onnx: unsupported attribute kind for " + a.name);
  }
  w.int_field(20, a.kind);
  return w;
}

inline wire::Writer encode(const NodeDef& n) {
  wire::Writer w;
  for (const auto& i : n.inputs) w.bytes_field(1, i);
  for (const auto& o : n.outputs) w.bytes_field(2, o);
  w.bytes_field(3, n.name);
  w.bytes_field(4, n.op_type);
  for (const auto& a : n.attributes) w.message_field(5, encode(a));
  return w;
}

inline wire::Writer encode(const ValueInfo& v) {
  wire::Writer shape;
  for (const auto& d : v.shape) {
    wire::Writer dim;
    if (d.param.empty())
      dim.int_field(1, d.value);
    else
      dim.bytes_field(2, d.param);
    shape.message_field(1, dim);
  }
  wire::Writer tensor_type;
  tensor_type.int_field(1, static_cast<std::int32_t>(v.dtype));
  tensor_type.message_field(2, shape);
  wire::Writer type;
  type.message_field(1, tensor_type);
  wire::Writer w;
  w.bytes_field(1, v.name);
  w.message_field(2, type);
  return w;
}

inline wire::Writer encode(const Graph& g) {
  wire::Writer w;
  for (const auto& n : g.nodes) w.message_field(1, encode(n));
  w.bytes_field(2, g.name);
  for (const auto& t : g.initializers) w.message_field(5, encode(t));
  for (const auto& i : g.inputs) w.message_field(11, encode(i));
  for (const auto& o : g.outputs) w.message_field(12, encode(o));
  return w;
}

inline TensorData decode_tensor(std::string_view bytes) {
  TensorData t;
  std::string raw;
  bool have_raw = false;
  wire::Reader r(bytes);
  while (!r.done()) {
    const auto f = r.next();
    switch (f.number) {
      case 1: wire::read_int64s(f, t.dims); break;
      case 2: t.dtype = static_cast<DType>(f.varint); break;
      case 4: wire::read_floats(f, t.floats); break;
      case 7: wire::read_int64s(f, t.ints); break;
      case 8: t.name = wire::to_string(f); break;
      case 9: raw = wire::to_string(f); have_raw = true; break;
      default: break;
    }
  }
  if (t.dtype != DType::Float && t.dtype != DType::Int64)
    throw FormatError("onnx: tensor '" + t.name + "' has unsupported data type " + std::to_string(static_cast<int>(t.dtype)));
  for (auto d : t.dims)
    if (d < 0) throw FormatError("onnx: tensor '" + t.name + "' has negative dimension");
  if (have_raw) {
    const std::size_t width = t.dtype == DType::Float ? 4 : 8;
    if (raw.size() != t.count() * width)
      throw FormatError("onnx: tensor '" + t.name + "' raw data size does not match its dimensions");
    if (t.dtype == DType::Float) {
      t.floats.resize(t.count());
      for (std::size_t i = 0; i < t.floats.size(); ++i) {
        std::uint32_t u = 0;
        for (int k = 0; k < 4; ++k) u |= static_cast<std::uint32_t>(static_cast<unsigned char>(raw[i * 4 + k])) << (8 * k);
        t.floats[i] = std::bit_cast<float>(u);
      }
    } else {
      t.ints.resize(t.count());
      for (std::size_t i = 0; i < t.ints.size(); ++i) {
        std::uint64_t u = 0;
        for (int k = 0; k < 8; ++k) u |= static_cast<std::uint64_t>(static_cast<unsigned char>(raw[i * 8 + k])) << (8 * k);
        t.ints[i] = static_cast<std::int64_t>(u);
      }
    }
  }
  const std::size_t have = t.dtype == DType::Float ? t.floats.size() : t.ints.size();
  if (have != t.count()) throw FormatError("onnx: tensor '" + t.name + "' element count does not match its dimensions");
  return t;
}

inline Attribute decode_attribute(std::string_view bytes) {
  Attribute a;
  wire::Reader r(bytes);
  bool typed = false;
  while (!r.done()) {
    const auto f = r.next();
    switch (f.number) {
      case 1: a.name = wire::to_string(f); break;
      case 2: a.f = std::bit_cast<float>(f.fixed32); break;
      case 3: a.i = static_cast<std::int64_t>(f.varint); break;
      case 4: a.s = wire::to_string(f); break;
      case 7: wire::read_floats(f, a.floats); break;
      case 8: wire::read_int64s(f, a.ints); break;
      case 20: a.kind = static_cast<Attribute::Kind>(f.varint); typed = true; break;
      default: break;
    }
  }
  if (!typed) throw FormatError("onnx: attribute '" + a.name + "' has no type");
  return a;
}

inline NodeDef decode_node(std::string_view bytes) {
  NodeDef n;
  wire::Reader r(bytes);
  while (!r.done()) {
    const auto f = r.next();
    switch (f.number) {
      case 1: n.inputs.push_back(wire::to_string(f)); break;
      case 2: n.outputs.push_back(wire::to_string(f)); break;
      case 3: n.name = wire::to_string(f); break;
      case 4: n.op_type = wire::to_string(f); break;
      case 5: n.attributes.push_back(decode_attribute(f.bytes)); break;
      default: break;
    }
  }
  return n;
}

inline ValueInfo decode_value_info(std::string_view bytes) {
  ValueInfo v;
  wire::Reader r(bytes);
  while (!r.done()) {
    const auto f = r.next();
    if (f.number == 1) {
      v.name = wire::to_string(f);
    } else if (f.number == 2) {
      wire::Reader tr(f.bytes);
      while (!tr.done()) {
        const auto tf = tr.next();
        if (tf.number != 1) continue;
        wire::Reader tt(tf.bytes);
        while (!tt.done()) {
          const auto ef = tt.next();
          if (ef.number == 1) {
            v.dtype = static_cast<DType>(ef.varint);
          } else if (ef.number == 2) {
            wire::Reader sr(ef.bytes);
            while (!sr.done()) {
              const auto df = sr.next();
              if (df.number != 1) continue;
              Dim d;
              wire::Reader dr(df.bytes);
              while (!dr.done()) {
                const auto x = dr.next();
                if (x.number == 1) d.value = static_cast<std::int64_t>(x.varint);
                if (x.number == 2) d.param = wire::to_string(x);
              }
              v.shape.push_back(d);
            }
          }
        }
      }
    }
  }
  return v;
}

inline Graph decode_graph(std::string_view bytes) {
  Graph g;
  wire::Reader r(bytes);
  while (!r.done()) {
    const auto f = r.next();
    switch (f.number) {
      case 1: g.nodes.push_back(decode_node(f.bytes)); break;
      case 2: g.name = wire::to_string(f); break;
      case 5: g.initializers.push_back(decode_tensor(f.bytes)); break;
      case 11: g.inputs.push_back(decode_value_info(f.bytes)); break;
      case 12: g.outputs.push_back(decode_value_info(f.bytes)); break;
      default: break;
    }
  }
  return g;
}

}  // namespace detail

inline std::string serialize(const Model& m) {
  wire::Writer w;
  w.int_field(1, m.ir_version);
  w.bytes_field(2, m.producer_name);
  w.bytes_field(3, m.producer_version);
  w.message_field(7, detail::encode(m.graph));
  wire::Writer opset;
  opset.bytes_field(1, "");
  opset.int_field(2, m.opset);
  w.message_field(8, opset);
  for (const auto& [k, v] : m.metadata) {
    wire::Writer e;
    e.bytes_field(1, k);
    e.bytes_field(2, v);
    w.message_field(14, e);
  }
  return w.str();
}

inline Model parse(std::string_view bytes) {
  Model m;
  bool have_graph = false;
  m.opset = 0;
  wire::Reader r(bytes);
  while (!r.done()) {
    const auto f = r.next();
    switch (f.number) {
      case 1: m.ir_version = static_cast<std::int64_t>(f.varint); break;
      case 2: m.producer_name = wire::to_string(f); break;
      case 3: m.producer_version = wire::to_string(f); break;
      case 7: m.graph = detail::decode_graph(f.bytes); have_graph = true; break;
      case 8: {
        wire::Reader o(f.bytes);
        std::string domain;
        std::int64_t version = 0;
        while (!o.done()) {
          const auto of = o.next();
          if (of.number == 1) domain = wire::to_string(of);
          if (of.number == 2) version = static_cast<std::int64_t>(of.varint);
        }
        if (domain.empty() || domain == "ai.onnx") m.opset = version;
        break;
      }
      case 14: {
        wire::Reader e(f.bytes);
        std::pair<std::string, std::string> kv;
        while (!e.done()) {
          const auto ef = e.next();
          if (ef.number == 1) kv.first = wire::to_string(ef);
          if (ef.number == 2) kv.second = wire::to_string(ef);
        }
        m.metadata.push_back(std::move(kv));
        break;
      }
      default: break;
    }
  }
  if (!have_graph) throw FormatError("onnx: model has no graph");
  if (m.opset == 0) throw FormatError("onnx: model declares no default-domain opset");
  return m;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------- builder

/// Accumulates nodes and initializers while modules describe their
/// evaluation-mode computation.
class GraphBuilder {
 public:
  std::string fresh(const std::string& hint) { return hint + "_" + std::to_string(counter_++); }

  template <typename T>
  std::string weight(const std::string& name, const Tensor<T>& t) {
    TensorData d;
    d.name = name;
    d.dtype = DType::Float;
    for (auto s : t.shape()) d.dims.push_back(static_cast<std::int64_t>(s));
    d.floats.reserve(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) d.floats.push_back(static_cast<float>(t[i]));
    graph_.initializers.push_back(std::move(d));
    return name;
  }

  std::string float_const(const std::string& hint, std::vector<float> values, std::vector<std::int64_t> dims) {
    TensorData d;
    d.name = fresh(hint);
    d.dtype = DType::Float;
    d.dims = std::move(dims);
    d.floats = std::move(values);
    graph_.initializers.push_back(d);
    return d.name;
  }

  std::string scalar(const std::string& hint, float v) { return float_const(hint, {v}, {}); }

  std::string int_const(const std::string& hint, std::vector<std::int64_t> values) {
    TensorData d;
    d.name = fresh(hint);
    d.dtype = DType::Int64;
    d.dims = {static_cast<std::int64_t>(values.size())};
    d.ints = std::move(values);
    graph_.initializers.push_back(d);
    return d.name;
  }

  std::string op(const std::string& op_type, std::vector<std::string> inputs, std::vector<Attribute> attrs = {},
                 const std::string& hint = "") {
    NodeDef n;
    n.op_type = op_type;
    n.inputs = std::move(inputs);
    n.attributes = std::move(attrs);
    n.outputs = {fresh(hint.empty() ? op_type : hint)};
    n.name = "n" + std::to_string(graph_.nodes.size()) + "_" + op_type;
    graph_.nodes.push_back(std::move(n));
    return graph_.nodes.back().outputs[0];
  }

  /// Renames the output of the last node (used to give graph outputs fixed names).
  void rename_last_output(const std::string& name) { graph_.nodes.back().outputs[0] = name; }

  void add_input(ValueInfo v) { graph_.inputs.push_back(std::move(v)); }
  void add_output(ValueInfo v) { graph_.outputs.push_back(std::move(v)); }
  Graph& graph() { return graph_; }

 private:
  Graph graph_;
  std::size_t counter_ = 0;
};

}  // namespace mmfuse::onnx
