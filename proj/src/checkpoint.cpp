// Copyright (c) 2026 The NestedFormer-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#include "nestedformer/checkpoint.hpp"

#include <bit>
#include <fstream>
#include <map>
#include <sstream>

#include "nestedformer/serialization.hpp"

namespace nf {

namespace {

void put_le(std::string& buf, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

void put_tensor(std::string& buf, const std::string& name, const Tensor& t) {
  if (name.size() > 0xFFFFu) throw ValidationError("checkpoint: tensor name too long: " + name);
  if (t.rank() > 0xFFu) throw ValidationError("checkpoint: tensor rank too large: " + name);
  put_le(buf, name.size(), 2);
  buf += name;
  put_le(buf, t.rank(), 1);
  for (auto e : t.shape()) {
    if (e > 0xFFFFFFFFu) throw ValidationError("checkpoint: extent does not fit in 32 bits: " + name);
    put_le(buf, e, 4);
  }
  for (double d : t.values()) put_le(buf, std::bit_cast<std::uint32_t>(static_cast<float>(d)), 4);
}

class Cursor {
 public:
  Cursor(const std::string& bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}
  std::uint64_t le(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool at_end() const { return pos_ == bytes_.size(); }
  FormatError error(const std::string& msg) const { return FormatError(what_ + ": " + msg); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw error("truncated file");
  }
  const std::string& bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const NestedFormer& model, const OptimState* optim) {
  const auto& entries = model.params().entries();
  if (optim && (optim->m.size() != entries.size() || optim->v.size() != entries.size())) {
    throw ContractError("save_checkpoint: optimizer state does not match the parameter set");
  }
  nlohmann::json header{{"model", model.config()}, {"step", optim ? optim->step : 0}, {"optimizer", optim != nullptr}};
  const std::string text = header.dump();

  std::string buf = "NFCK";
  put_le(buf, kCheckpointVersion, 4);
  put_le(buf, text.size(), 4);
  buf += text;
  const std::size_t count = entries.size() * (optim ? 3 : 1);
  put_le(buf, count, 4);
  for (const auto& p : entries) put_tensor(buf, p.name, p.var.value());
  if (optim) {
    for (std::size_t i = 0; i < entries.size(); ++i) put_tensor(buf, "optim.m." + entries[i].name, optim->m[i]);
    for (std::size_t i = 0; i < entries.size(); ++i) put_tensor(buf, "optim.v." + entries[i].name, optim->v[i]);
  }

  // Write to a sibling file first so an interrupted save never clobbers a good checkpoint.
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ValidationError("cannot write '" + tmp.string() + "'");
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw Error("write failed for '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected, bool force_config) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open checkpoint '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  const std::string bytes = ss.str();
  Cursor cur(bytes, "checkpoint '" + path.string() + "'");

  if (cur.str(bytes.size() < 4 ? bytes.size() : 4) != "NFCK") throw cur.error("bad magic, expected 'NFCK'");
  const auto version = cur.le(4);
  if (version != kCheckpointVersion) {
    throw cur.error("unsupported version " + std::to_string(version) + " (this build reads version " +
                    std::to_string(kCheckpointVersion) + ")");
  }
  const std::string text = cur.str(cur.le(4));
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw cur.error(std::string("malformed config header: ") + e.what());
  }
  if (!header.contains("model")) throw cur.error("config header has no model section");
  const ModelConfig stored = parse_model_config(header.at("model"));

  std::map<std::string, Tensor> tensors;
  const auto count = cur.le(4);
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::string name = cur.str(cur.le(2));
    const auto rank = cur.le(1);
    Shape shape;
    for (std::uint64_t r = 0; r < rank; ++r) shape.push_back(cur.le(4));
    Tensor t(shape);
    for (auto& d : t.storage()) d = std::bit_cast<float>(static_cast<std::uint32_t>(cur.le(4)));
    if (!tensors.emplace(name, std::move(t)).second) throw cur.error("duplicate tensor name '" + name + "'");
  }
  if (!cur.at_end()) throw cur.error("trailing bytes after the tensor table");

  if (expected && !force_config) {
    if (nlohmann::json(*expected) != nlohmann::json(stored)) {
      throw ConfigError("checkpoint '" + path.string() +
                        "' was written with a different model configuration (use --force-config to load it anyway)");
    }
  }

  LoadedCheckpoint out{NestedFormer(stored), std::nullopt, header.value("step", std::uint64_t{0})};
  const bool has_optim = header.value("optimizer", false);
  const auto& entries = out.model.params().entries();
  auto take = [&](const std::string& name, const Shape& shape) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw cur.error("missing tensor '" + name + "'");
    if (it->second.shape() != shape) {
      throw cur.error("tensor '" + name + "' has shape " + to_string(it->second.shape()) + ", expected " + to_string(shape));
    }
    Tensor t = std::move(it->second);
    tensors.erase(it);
    return t;
  };
  std::vector<Tensor> values;
  for (const auto& p : entries) values.push_back(take(p.name, p.var.shape()));
  if (has_optim) {
    OptimState s;
    s.step = out.step;
    for (const auto& p : entries) s.m.push_back(take("optim.m." + p.name, p.var.shape()));
    for (const auto& p : entries) s.v.push_back(take("optim.v." + p.name, p.var.shape()));
    out.optim = std::move(s);
  }
  if (!tensors.empty()) throw cur.error("unexpected tensor '" + tensors.begin()->first + "'");
  for (std::size_t i = 0; i < entries.size(); ++i) {
    Var v = entries[i].var;
    v.mutable_value() = std::move(values[i]);
  }
  return out;
}

}  // namespace nf
