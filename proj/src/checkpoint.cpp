#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

#include <zlib.h>

#include "gmt/training.hpp"

namespace gmt {

namespace {

using nlohmann::json;

constexpr char kMagic[8] = {'G', 'M', 'T', 'C', 'K', 'P', 'T', '1'};
constexpr std::uint8_t kFloat64 = 1;
constexpr std::uint8_t kUint64 = 2;

class Writer {
 public:
  void bytes(const void* p, std::size_t n) { buf_.append(static_cast<const char*>(p), n); }
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(Real v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  std::string& buffer() { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  Reader(const std::string& data, std::size_t end) : data_(data), end_(end) {}

  void need(std::size_t n) const {
    if (pos_ + n > end_) throw LoadError("checkpoint truncated");
  }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(data_[pos_++]);
  }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(u8()) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(u8()) << (8 * i);
    return v;
  }
  Real f64() { return std::bit_cast<Real>(u64()); }
  std::string take(std::size_t n) {
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == end_; }

 private:
  const std::string& data_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

std::uint32_t crc(const char* data, std::size_t n) {
  return static_cast<std::uint32_t>(
      ::crc32(::crc32(0L, Z_NULL, 0), reinterpret_cast<const Bytef*>(data), static_cast<uInt>(n)));
}

std::string usage_name(std::size_t l) { return "block" + std::to_string(l) + ".usage"; }
std::string age_name(std::size_t l) { return "block" + std::to_string(l) + ".age"; }

}  // namespace

std::string config_hash(const ModelConfig& config) {
  const std::string text = config.to_json().dump();
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char out[17];
  std::snprintf(out, sizeof out, "%016llx", static_cast<unsigned long long>(h));
  return out;
}

Checkpoint capture(const TrainingState& state) {
  Checkpoint c;
  c.config = RunConfig{state.model.config, state.train}.to_json();
  c.config_hash = config_hash(state.model.config);
  c.step = state.step;
  c.rng = rng_state(state.rng);
  c.best_val = state.best_val;
  c.adam_t = state.adam.t;
  const std::vector<const Parameter*> params = state.model.parameters();
  for (const Parameter* p : params) c.tensors.emplace_back(p->name, p->value);
  for (std::size_t l = 0; l < state.model.blocks.size(); ++l) {
    const Block& b = state.model.blocks[l];
    if (!b.cell) continue;
    c.tensors.emplace_back(usage_name(l), Matrix::row_vector(b.cell->bank.usage));
    c.counters.emplace_back(age_name(l), b.cell->bank.age);
  }
  if (state.adam.m.size() == params.size()) {
    for (std::size_t k = 0; k < params.size(); ++k) {
      c.tensors.emplace_back("adam.m." + params[k]->name, state.adam.m[k]);
      c.tensors.emplace_back("adam.v." + params[k]->name, state.adam.v[k]);
    }
  }
  return c;
}

void checkpoint_save(const TrainingState& state, const std::filesystem::path& path) {
  const Checkpoint c = capture(state);
  json meta = {{"format_version", 1},
               {"config", c.config},
               {"config_hash", c.config_hash},
               {"step", c.step},
               {"rng", c.rng},
               {"best_val", std::isfinite(c.best_val) ? json(c.best_val) : json(nullptr)},
               {"adam_t", c.adam_t}};
  Writer w;
  w.bytes(kMagic, sizeof kMagic);
  const std::string m = meta.dump();
  w.u64(m.size());
  w.bytes(m.data(), m.size());
  w.u64(c.tensors.size() + c.counters.size());
  for (const auto& [name, t] : c.tensors) {
    w.str(name);
    w.u8(kFloat64);
    w.u32(2);
    w.u64(t.rows());
    w.u64(t.cols());
    for (Real v : t.values()) w.f64(v);
  }
  for (const auto& [name, t] : c.counters) {
    w.str(name);
    w.u8(kUint64);
    w.u32(1);
    w.u64(t.size());
    for (std::uint64_t v : t) w.u64(v);
  }
  w.u32(crc(w.buffer().data(), w.buffer().size()));

  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigurationError("cannot write checkpoint " + path.string());
    out.write(w.buffer().data(), static_cast<std::streamsize>(w.buffer().size()));
    if (!out) throw ConfigurationError("failed writing checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint checkpoint_load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open checkpoint " + path.string());
  const std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (data.size() < sizeof kMagic + 4) throw LoadError("checkpoint truncated");
  if (std::memcmp(data.data(), kMagic, sizeof kMagic) != 0) throw LoadError("not a GMTCKPT1 checkpoint");
  const std::size_t body = data.size() - 4;
  Reader tail(data, data.size());
  tail.take(body);
  if (tail.u32() != crc(data.data(), body)) throw LoadError("checkpoint checksum mismatch");

  Reader r(data, body);
  r.take(sizeof kMagic);
  const std::uint64_t meta_len = r.u64();
  json meta;
  try {
    meta = json::parse(r.take(meta_len));
  } catch (const json::exception& e) {
    throw LoadError(std::string("checkpoint metadata: ") + e.what());
  }
  Checkpoint c;
  try {
    if (meta.at("format_version").get<int>() != 1) throw LoadError("unsupported checkpoint version");
    c.config = meta.at("config");
    c.config_hash = meta.at("config_hash").get<std::string>();
    c.step = meta.at("step").get<std::uint64_t>();
    c.rng = meta.at("rng").get<std::string>();
    c.best_val = meta.at("best_val").is_null() ? std::numeric_limits<Real>::infinity() : meta.at("best_val").get<Real>();
    c.adam_t = meta.at("adam_t").get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw LoadError(std::string("checkpoint metadata: ") + e.what());
  }
  ModelConfig mc;
  try {
    mc = ModelConfig::from_json(c.config.at("model"));
  } catch (const std::exception& e) {
    throw LoadError(std::string("checkpoint config: ") + e.what());
  }
  if (config_hash(mc) != c.config_hash) throw LoadError("checkpoint config hash does not match its config");

  const std::uint64_t count = r.u64();
  for (std::uint64_t k = 0; k < count; ++k) {
    std::string name = r.take(r.u32());
    const std::uint8_t dtype = r.u8();
    const std::uint32_t rank = r.u32();
    if (dtype == kFloat64 && rank == 2) {
      const std::uint64_t rows = r.u64(), cols = r.u64();
      r.need(rows * cols * 8);
      Matrix m(rows, cols);
      for (Real& v : m.values()) v = r.f64();
      c.tensors.emplace_back(std::move(name), std::move(m));
    } else if (dtype == kUint64 && rank == 1) {
      const std::uint64_t n = r.u64();
      r.need(n * 8);
      std::vector<std::uint64_t> v(n);
      for (std::uint64_t& x : v) x = r.u64();
      c.counters.emplace_back(std::move(name), std::move(v));
    } else {
      throw LoadError("tensor '" + name + "' has unsupported dtype/rank");
    }
  }
  if (!r.done()) throw LoadError("trailing bytes in checkpoint");
  return c;
}

void restore(TrainingState& state, const Checkpoint& ckpt) {
  if (ckpt.config_hash != config_hash(state.model.config))
    throw LoadError("checkpoint config hash " + ckpt.config_hash + " does not match model config " +
                    config_hash(state.model.config));
  std::map<std::string, const Matrix*> tensors;
  for (const auto& [name, m] : ckpt.tensors)
    if (!tensors.emplace(name, &m).second) throw LoadError("duplicate tensor '" + name + "'");
  std::map<std::string, const std::vector<std::uint64_t>*> counters;
  for (const auto& [name, v] : ckpt.counters) counters.emplace(name, &v);

  auto find = [&](const std::string& name, std::size_t rows, std::size_t cols) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw LoadError("checkpoint lacks tensor '" + name + "'");
    if (it->second->rows() != rows || it->second->cols() != cols)
      throw LoadError("tensor '" + name + "' has shape " + it->second->shape_string());
    return it->second;
  };

  std::vector<Parameter*> params = state.model.parameters();
  std::vector<const Matrix*> values, moments_m, moments_v;
  for (Parameter* p : params) values.push_back(find(p->name, p->value.rows(), p->value.cols()));
  const bool with_adam = ckpt.adam_t > 0;
  if (with_adam)
    for (Parameter* p : params) {
      moments_m.push_back(find("adam.m." + p->name, p->value.rows(), p->value.cols()));
      moments_v.push_back(find("adam.v." + p->name, p->value.rows(), p->value.cols()));
    }
  std::vector<std::pair<const Matrix*, const std::vector<std::uint64_t>*>> banks;
  for (std::size_t l = 0; l < state.model.blocks.size(); ++l) {
    const Block& b = state.model.blocks[l];
    if (!b.cell) continue;
    const Matrix* u = find(usage_name(l), 1, b.cell->bank.slots());
    auto it = counters.find(age_name(l));
    if (it == counters.end() || it->second->size() != b.cell->bank.slots())
      throw LoadError("checkpoint lacks ages for block " + std::to_string(l));
    banks.emplace_back(u, it->second);
  }
  Rng rng;
  set_rng_state(rng, ckpt.rng);

  for (std::size_t k = 0; k < params.size(); ++k) params[k]->value = *values[k];
  state.adam = AdamState{};
  if (with_adam) {
    for (std::size_t k = 0; k < params.size(); ++k) {
      state.adam.m.push_back(*moments_m[k]);
      state.adam.v.push_back(*moments_v[k]);
    }
    state.adam.t = ckpt.adam_t;
  }
  std::size_t k = 0;
  for (Block& b : state.model.blocks) {
    if (!b.cell) continue;
    const auto& [u, a] = banks[k++];
    b.cell->bank.usage.assign(u->values().begin(), u->values().end());
    b.cell->bank.age = *a;
  }
  state.rng = rng;
  state.step = ckpt.step;
  state.best_val = ckpt.best_val;
}

TrainingState state_from_checkpoint(const Checkpoint& ckpt) {
  RunConfig rc;
  try {
    rc = RunConfig::from_json(ckpt.config);
  } catch (const ConfigurationError& e) {
    throw LoadError(std::string("checkpoint config: ") + e.what());
  }
  TrainingState s(Model::create(rc.model, rc.train.seed), rc.train);
  restore(s, ckpt);
  return s;
}

}  // namespace gmt
