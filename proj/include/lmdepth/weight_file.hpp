#pragma once

// Little-endian weight container.
//
//   "LMDW" | u16 version | u32 entry count
//   per entry: u16 name length | name bytes | u8 dtype (0 f32, 1 i8) | u8 rank |
//              u32 dims[rank] | f64 scale | i32 zero_point | u64 offset | u64 length
//   payload: tensor bytes at the recorded offsets, packed back to back
//
// Quantized layers additionally store their activation parameters as
// rank-0, zero-length i8 entries named "<weight>.in_qp" and "<weight>.out_qp".

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "lmdepth/model.hpp"

namespace lmdepth {

inline constexpr char kWeightMagic[4] = {'L', 'M', 'D', 'W'};
inline constexpr std::uint16_t kWeightVersion = 1;

struct WeightEntry {
  std::string name;
  DType dtype = DType::f32;
  Shape dims;
  double scale = 1.0;
  std::int32_t zero_point = 0;
  std::uint64_t offset = 0;
  std::uint64_t length = 0;
};

struct WeightFile {
  std::vector<WeightEntry> entries;
  std::vector<std::uint8_t> bytes;  // whole file

  const std::uint8_t* payload(const WeightEntry& e) const { return bytes.data() + e.offset; }
};

namespace wire {

class Writer {
 public:
  template <class U>
  void put(U v) {
    using Bits = std::conditional_t<sizeof(U) == 8, std::uint64_t,
                                    std::conditional_t<sizeof(U) == 4, std::uint32_t,
                                                       std::conditional_t<sizeof(U) == 2, std::uint16_t, std::uint8_t>>>;
    const Bits b = std::bit_cast<Bits>(v);
    for (std::size_t i = 0; i < sizeof(U); ++i) buf_.push_back(static_cast<std::uint8_t>(b >> (8 * i)));
  }
  void put_bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  std::vector<std::uint8_t>& buffer() { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : b_(b) {}
  template <class U>
  U get(const char* what) {
    using Bits = std::conditional_t<sizeof(U) == 8, std::uint64_t,
                                    std::conditional_t<sizeof(U) == 4, std::uint32_t,
                                                       std::conditional_t<sizeof(U) == 2, std::uint16_t, std::uint8_t>>>;
    need(sizeof(U), what);
    Bits v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<Bits>(static_cast<Bits>(b_[pos_ + i]) << (8 * i));
    pos_ += sizeof(U);
    return std::bit_cast<U>(v);
  }
  std::string get_string(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n, const char* what) const {
    if (pos_ + n > b_.size()) {
      throw FormatError(std::string("weight file truncated while reading ") + what + " at byte " +
                        std::to_string(pos_));
    }
  }
  const std::vector<std::uint8_t>& b_;
  std::size_t pos_ = 0;
};

}  // namespace wire

/// Serializes entries whose payloads are given in order; offsets are assigned here.
inline std::vector<std::uint8_t> encode_weight_file(std::vector<WeightEntry> entries,
                                                    const std::vector<std::vector<std::uint8_t>>& payloads) {
  std::size_t header = 4 + 2 + 4;
  for (const auto& e : entries) header += 2 + e.name.size() + 1 + 1 + 4 * e.dims.size() + 8 + 4 + 8 + 8;
  std::uint64_t off = header;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    entries[i].offset = off;
    entries[i].length = payloads[i].size();
    off += payloads[i].size();
  }
  wire::Writer w;
  w.put_bytes(kWeightMagic, 4);
  w.put<std::uint16_t>(kWeightVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    w.put<std::uint16_t>(static_cast<std::uint16_t>(e.name.size()));
    w.put_bytes(e.name.data(), e.name.size());
    w.put<std::uint8_t>(static_cast<std::uint8_t>(e.dtype));
    w.put<std::uint8_t>(static_cast<std::uint8_t>(e.dims.size()));
    for (auto d : e.dims) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
    w.put<double>(e.scale);
    w.put<std::int32_t>(e.zero_point);
    w.put<std::uint64_t>(e.offset);
    w.put<std::uint64_t>(e.length);
  }
  for (const auto& p : payloads) w.put_bytes(p.data(), p.size());
  return std::move(w.buffer());
}

/// Parses and fully validates the table; throws FormatError on any defect.
inline WeightFile parse_weight_file(std::vector<std::uint8_t> bytes) {
  WeightFile f;
  f.bytes = std::move(bytes);
  wire::Reader r(f.bytes);
  if (r.get_string(4, "magic") != std::string(kWeightMagic, 4)) throw FormatError("weight file: bad magic");
  const auto version = r.get<std::uint16_t>("version");
  if (version != kWeightVersion) {
    throw FormatError("weight file: unsupported version " + std::to_string(version));
  }
  const auto count = r.get<std::uint32_t>("entry count");
  std::set<std::string> names;
  for (std::uint32_t i = 0; i < count; ++i) {
    WeightEntry e;
    const auto nlen = r.get<std::uint16_t>("name length");
    e.name = r.get_string(nlen, "name");
    if (!names.insert(e.name).second) throw FormatError("weight file: duplicate tensor name '" + e.name + "'");
    const auto dt = r.get<std::uint8_t>("dtype");
    if (dt != static_cast<std::uint8_t>(DType::f32) && dt != static_cast<std::uint8_t>(DType::i8)) {
      throw FormatError("weight file: tensor '" + e.name + "' has unknown dtype " + std::to_string(dt));
    }
    e.dtype = static_cast<DType>(dt);
    const auto rank = r.get<std::uint8_t>("rank");
    for (std::uint8_t k = 0; k < rank; ++k) {
      const auto d = r.get<std::uint32_t>("dims");
      if (d == 0) throw FormatError("weight file: tensor '" + e.name + "' has a zero dimension");
      e.dims.push_back(d);
    }
    e.scale = r.get<double>("scale");
    e.zero_point = r.get<std::int32_t>("zero_point");
    e.offset = r.get<std::uint64_t>("offset");
    e.length = r.get<std::uint64_t>("length");
    f.entries.push_back(std::move(e));
  }
  // Payloads must tile the rest of the file exactly, in table order.
  std::uint64_t expect = r.pos();
  for (const auto& e : f.entries) {
    const std::uint64_t elem = e.dtype == DType::f32 ? 4 : 1;
    const std::uint64_t want = e.dims.empty() ? 0 : elem * shape_numel(e.dims);
    if (e.length != want) {
      throw FormatError("weight file: tensor '" + e.name + "' length " + std::to_string(e.length) +
                        " does not match its shape " + shape_str(e.dims));
    }
    if (e.offset != expect) {
      throw FormatError("weight file: tensor '" + e.name + "' payload at offset " + std::to_string(e.offset) +
                        ", expected " + std::to_string(expect));
    }
    expect += e.length;
  }
  if (expect != f.bytes.size()) {
    throw FormatError("weight file: size " + std::to_string(f.bytes.size()) + " but table accounts for " +
                      std::to_string(expect) + " bytes");
  }
  if (f.entries.empty() && count != 0) throw FormatError("weight file: inconsistent entry count");
  for (const auto& e : f.entries) {
    if (e.dtype == DType::i8 && !(e.scale > 0.0)) {
      throw FormatError("weight file: i8 tensor '" + e.name + "' has nonpositive scale");
    }
    if (e.dtype == DType::i8 && (e.zero_point < -128 || e.zero_point > 127)) {
      throw FormatError("weight file: i8 tensor '" + e.name + "' zero point out of range");
    }
  }
  return f;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

inline void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

namespace detail {

inline std::vector<std::uint8_t> f32_payload(const auto& values) {
  wire::Writer w;
  for (auto v : values) w.put<float>(static_cast<float>(v));
  return std::move(w.buffer());
}

inline std::vector<std::uint8_t> i8_payload(const std::vector<std::int8_t>& values) {
  std::vector<std::uint8_t> out(values.size());
  std::memcpy(out.data(), values.data(), values.size());
  return out;
}

}  // namespace detail

/// Float parameters become f32 entries; layers holding an i8 weight are
/// written as i8 with their activation parameters.
template <class T>
std::vector<std::uint8_t> save_weights(LMDepth<T>& model) {
  std::vector<WeightEntry> entries;
  std::vector<std::vector<std::uint8_t>> payloads;
  for (auto& slot : collect_params(model)) {
    WeightEntry e;
    e.name = slot.name;
    e.dims = slot.var->shape();
    if (slot.quant && slot.quant->weight) {
      const QuantizedTensor& q = *slot.quant->weight;
      e.dtype = DType::i8;
      e.scale = q.qp.scale;
      e.zero_point = q.qp.zero_point;
      entries.push_back(e);
      payloads.push_back(detail::i8_payload(q.data));
      for (auto [suffix, qp] : {std::pair{".in_qp", slot.quant->in_qp}, std::pair{".out_qp", slot.quant->out_qp}}) {
        WeightEntry a;
        a.name = slot.name + suffix;
        a.dtype = DType::i8;
        a.scale = qp.scale;
        a.zero_point = qp.zero_point;
        entries.push_back(a);
        payloads.emplace_back();
      }
    } else {
      entries.push_back(e);
      payloads.push_back(detail::f32_payload(slot.var->data()));
    }
  }
  return encode_weight_file(std::move(entries), payloads);
}

template <class T>
void save_weights(LMDepth<T>& model, const std::filesystem::path& path) {
  write_file_bytes(path, save_weights(model));
}

/// Loads into `model`, whose architecture must match the table exactly.
/// Nothing is assigned unless the whole file validates.
template <class T>
void load_weights(LMDepth<T>& model, const std::vector<std::uint8_t>& bytes) {
  const WeightFile f = parse_weight_file(bytes);
  std::map<std::string, const WeightEntry*> by_name;
  for (const auto& e : f.entries) by_name[e.name] = &e;

  auto slots = collect_params(model);
  std::vector<std::string> missing, mismatched;
  std::set<std::string> used;
  for (const auto& s : slots) {
    auto it = by_name.find(s.name);
    if (it == by_name.end()) {
      missing.push_back(s.name);
      continue;
    }
    used.insert(s.name);
    const WeightEntry& e = *it->second;
    if (e.dims != s.var->shape()) {
      mismatched.push_back(s.name + " " + shape_str(e.dims) + " vs model " + shape_str(s.var->shape()));
    }
    if (e.dtype == DType::i8) {
      if (!s.quant) mismatched.push_back(s.name + " is stored as i8 but is not a quantizable weight");
      for (const char* suffix : {".in_qp", ".out_qp"}) {
        auto q = by_name.find(s.name + suffix);
        if (q == by_name.end() || q->second->dtype != DType::i8 || !q->second->dims.empty()) {
          missing.push_back(s.name + suffix);
        } else {
          used.insert(s.name + suffix);
        }
      }
    }
  }
  std::vector<std::string> extra;
  for (const auto& e : f.entries)
    if (!used.count(e.name)) extra.push_back(e.name);
  if (!missing.empty() || !extra.empty() || !mismatched.empty()) {
    auto list = [](const std::vector<std::string>& v) {
      std::string s;
      for (std::size_t i = 0; i < v.size() && i < 8; ++i) s += (i ? ", " : "") + v[i];
      if (v.size() > 8) s += ", ... (" + std::to_string(v.size()) + " total)";
      return s;
    };
    std::string msg = "weight file does not match the model architecture:";
    if (!missing.empty()) msg += " missing [" + list(missing) + "]";
    if (!extra.empty()) msg += " extra [" + list(extra) + "]";
    if (!mismatched.empty()) msg += " mismatched [" + list(mismatched) + "]";
    throw FormatError(msg);
  }

  // Decode everything first, then commit.
  struct Pending {
    Tensor<T> value;
    std::optional<QuantizedTensor> q;
    QuantParams in_qp, out_qp;
  };
  std::vector<Pending> pending;
  pending.reserve(slots.size());
  for (const auto& s : slots) {
    const WeightEntry& e = *by_name.at(s.name);
    Pending p{Tensor<T>(e.dims), std::nullopt, {}, {}};
    const std::uint8_t* src = f.payload(e);
    if (e.dtype == DType::f32) {
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        std::uint32_t bits = 0;
        for (std::size_t b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(src[4 * i + b]) << (8 * b);
        p.value[i] = static_cast<T>(std::bit_cast<float>(bits));
      }
    } else {
      QuantizedTensor q{e.dims, std::vector<std::int8_t>(shape_numel(e.dims)), {e.scale, e.zero_point}};
      std::memcpy(q.data.data(), src, q.data.size());
      p.value = dequantize<T>(q);
      p.q = std::move(q);
      const WeightEntry& in = *by_name.at(s.name + ".in_qp");
      const WeightEntry& out = *by_name.at(s.name + ".out_qp");
      p.in_qp = {in.scale, in.zero_point};
      p.out_qp = {out.scale, out.zero_point};
    }
    pending.push_back(std::move(p));
  }
  for (std::size_t i = 0; i < slots.size(); ++i) {
    slots[i].var->mutable_value() = std::move(pending[i].value);
    if (slots[i].quant) {
      QuantState& qs = *slots[i].quant;
      qs = QuantState{};
      if (pending[i].q) {
        qs.weight = std::move(pending[i].q);
        qs.in_qp = pending[i].in_qp;
        qs.out_qp = pending[i].out_qp;
        qs.mode = ExecMode::quantized;
      }
    }
  }
}

template <class T>
void load_weights(LMDepth<T>& model, const std::filesystem::path& path) {
  load_weights(model, read_file_bytes(path));
}

}  // namespace lmdepth
