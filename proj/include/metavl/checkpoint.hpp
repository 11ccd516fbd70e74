#pragma once

// Binary checkpoint container. Layout (all integers little-endian u64 unless
// noted, strings are u64 length + bytes):
//
//   magic        8 bytes "MVLCKPT1"
//   fingerprint  string   model/config fingerprint the tensors belong to
//   step         u64      optimizer step counter
//   metadata     u64 count, then (key string, value string) pairs
//   tensors      u64 count, then per tensor:
//                  name string, dtype string ("f32" | "f64"),
//                  rank u64, dims u64 x rank, raw values (numel x dtype size)
//   checksum     u64      FNV-1a over every preceding byte
//
// Optimizer moments are stored as ordinary tensors named "adam.m/<param>" and
// "adam.v/<param>".

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "metavl/errors.hpp"
#include "metavl/optim.hpp"
#include "metavl/rng.hpp"
#include "metavl/tensor.hpp"

namespace metavl {

template <class T>
constexpr const char* dtype_name() {
  if constexpr (std::is_same_v<T, float>) {
    return "f32";
  } else {
    static_assert(std::is_same_v<T, double>, "checkpoints hold f32 or f64");
    return "f64";
  }
}

template <class T>
struct Checkpoint {
  std::string fingerprint;
  std::uint64_t step = 0;
  std::map<std::string, std::string> metadata;
  std::vector<NamedTensor<T>> tensors;

  const Tensor<T>* find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return &t;
    return nullptr;
  }
};

namespace detail {

class ByteWriter {
 public:
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void str(const std::string& s) {
    u64(s.size());
    buf_ += s;
  }
  void raw(const void* p, std::size_t n) { buf_.append(static_cast<const char*>(p), n); }
  std::string& buffer() { return buf_; }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::string& buf) : buf_(buf) {}
  std::uint64_t u64(const std::string& field) {
    need(8, field);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }
  std::string str(const std::string& field, std::size_t max_len = 1 << 20) {
    const auto n = u64(field + ".length");
    if (n > max_len) throw CheckpointError(field, "implausible length " + std::to_string(n));
    need(n, field);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void raw(void* dst, std::size_t n, const std::string& field) {
    need(n, field);
    std::memcpy(dst, buf_.data() + pos_, n);
    pos_ += n;
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n, const std::string& field) {
    if (pos_ + n > buf_.size()) throw CheckpointError(field, "file truncated");
  }
  const std::string& buf_;
  std::size_t pos_ = 0;
};

inline constexpr char kCheckpointMagic[9] = "MVLCKPT1";

}  // namespace detail

template <class T>
void save_checkpoint(const Checkpoint<T>& ck, const std::filesystem::path& path) {
  detail::ByteWriter w;
  w.raw(detail::kCheckpointMagic, 8);
  w.str(ck.fingerprint);
  w.u64(ck.step);
  w.u64(ck.metadata.size());
  for (const auto& [k, v] : ck.metadata) {
    w.str(k);
    w.str(v);
  }
  w.u64(ck.tensors.size());
  for (const auto& [name, t] : ck.tensors) {
    w.str(name);
    w.str(dtype_name<T>());
    w.u64(t.rank());
    for (auto d : t.shape()) w.u64(d);
    w.raw(t.data().data(), t.numel() * sizeof(T));
  }
  w.u64(fnv1a64(w.buffer()));
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write checkpoint " + path.string());
    out.write(w.buffer().data(), static_cast<std::streamsize>(w.buffer().size()));
    if (!out) throw Error("write failed for checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

template <class T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("file", "cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string buf = ss.str();

  detail::ByteReader r(buf);
  char magic[8];
  r.raw(magic, 8, "magic");
  if (std::memcmp(magic, detail::kCheckpointMagic, 8) != 0) {
    throw CheckpointError("magic", "not a checkpoint file");
  }
  Checkpoint<T> ck;
  ck.fingerprint = r.str("fingerprint");
  ck.step = r.u64("step");
  const auto nmeta = r.u64("metadata.count");
  if (nmeta > 100000) throw CheckpointError("metadata.count", "implausible count");
  for (std::uint64_t i = 0; i < nmeta; ++i) {
    const auto f = "metadata[" + std::to_string(i) + "]";
    auto k = r.str(f + ".key");
    ck.metadata[k] = r.str(f + ".value");
  }
  const auto ntensors = r.u64("tensors.count");
  if (ntensors > 1000000) throw CheckpointError("tensors.count", "implausible count");
  for (std::uint64_t i = 0; i < ntensors; ++i) {
    const auto f = "tensors[" + std::to_string(i) + "]";
    auto name = r.str(f + ".name");
    const auto fn = "tensor '" + name + "'";
    auto dtype = r.str(fn + ".dtype");
    if (dtype != dtype_name<T>()) {
      throw CheckpointError(fn + ".dtype", "stored as " + dtype + ", expected " + dtype_name<T>());
    }
    const auto rank = r.u64(fn + ".rank");
    if (rank > 8) throw CheckpointError(fn + ".rank", "implausible rank " + std::to_string(rank));
    Shape shape(rank);
    std::size_t numel = 1;
    for (auto& d : shape) {
      d = r.u64(fn + ".shape");
      if (d == 0 || d > (1u << 28)) throw CheckpointError(fn + ".shape", "invalid dimension");
      numel *= d;
    }
    std::vector<T> values(numel);
    r.raw(values.data(), numel * sizeof(T), fn + ".values");
    ck.tensors.emplace_back(std::move(name), Tensor<T>(std::move(shape), std::move(values)));
  }
  const auto body_end = r.pos();
  const auto stored = r.u64("checksum");
  if (stored != fnv1a64(std::string_view(buf.data(), body_end))) {
    throw CheckpointError("checksum", "content does not match stored checksum");
  }
  if (r.pos() != buf.size()) throw CheckpointError("checksum", "trailing bytes after checksum");
  return ck;
}

// Snapshot of parameters (and optionally optimizer state) into a checkpoint.
template <class T>
Checkpoint<T> capture_checkpoint(const std::string& fingerprint, const std::vector<NamedTensor<T>>& params,
                                 const Adam<T>* opt = nullptr) {
  Checkpoint<T> ck;
  ck.fingerprint = fingerprint;
  for (const auto& [name, t] : params) ck.tensors.emplace_back(name, t.detach());
  if (opt) {
    ck.step = opt->step_count();
    for (const auto& [name, mom] : opt->moments()) {
      ck.tensors.emplace_back("adam.m/" + name, Tensor<T>(Shape{mom.m.size()}, mom.m));
      ck.tensors.emplace_back("adam.v/" + name, Tensor<T>(Shape{mom.v.size()}, mom.v));
    }
  }
  return ck;
}

// Copies checkpoint values into live parameters. Rejects a fingerprint or
// shape mismatch before touching anything.
template <class T>
void restore_checkpoint(const Checkpoint<T>& ck, const std::string& fingerprint,
                        std::vector<NamedTensor<T>>& params, Adam<T>* opt = nullptr) {
  if (ck.fingerprint != fingerprint) {
    throw CheckpointError("fingerprint", "checkpoint built for '" + ck.fingerprint +
                                             "' cannot load into '" + fingerprint + "'");
  }
  for (const auto& [name, t] : params) {
    const auto* src = ck.find(name);
    if (!src) throw CheckpointError("tensor '" + name + "'", "missing from checkpoint");
    if (src->shape() != t.shape()) {
      throw CheckpointError("tensor '" + name + "'.shape",
                            "checkpoint has " + shape_str(src->shape()) + ", model has " + shape_str(t.shape()));
    }
  }
  if (opt) {
    for (const auto& [name, mom] : opt->moments()) {
      for (const char* kind : {"adam.m/", "adam.v/"}) {
        const auto* src = ck.find(kind + name);
        if (!src) throw CheckpointError(std::string("tensor '") + kind + name + "'", "missing from checkpoint");
        if (src->numel() != mom.m.size()) {
          throw CheckpointError(std::string("tensor '") + kind + name + "'.shape", "moment size mismatch");
        }
      }
    }
  }
  for (auto& [name, t] : params) {
    const auto* src = ck.find(name);
    std::copy(src->data().begin(), src->data().end(), t.mutable_data().begin());
  }
  if (opt) {
    for (auto& [name, mom] : opt->moments()) {
      auto m = ck.find("adam.m/" + name)->data();
      auto v = ck.find("adam.v/" + name)->data();
      mom.m.assign(m.begin(), m.end());
      mom.v.assign(v.begin(), v.end());
    }
    opt->set_step_count(ck.step);
  }
}

}  // namespace metavl
