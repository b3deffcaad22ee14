// SPDX-License-Identifier: Apache-2.0
#include "lgfd/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "lgfd/error.hpp"

namespace lgfd {

namespace {

std::string shape_token(const Shape& shape) {
  if (shape.empty()) return "scalar";
  std::string s;
  for (std::size_t i = 0; i < shape.size(); ++i) s += (i ? "x" : "") + std::to_string(shape[i]);
  return s;
}

Shape parse_shape(const std::string& token, const std::string& where) {
  if (token == "scalar") return {};
  Shape shape;
  std::istringstream is(token);
  std::string part;
  while (std::getline(is, part, 'x')) {
    try {
      shape.push_back(std::stoll(part));
    } catch (const std::exception&) {
      throw DataError(where + ": bad shape '" + token + "'");
    }
  }
  return shape;
}

void put_le(std::string& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xffU));
}

double get_le(const char* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return std::bit_cast<double>(bits);
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ParameterSet& params, const std::string& config_text) {
  std::ostringstream manifest;
  manifest << "lgfd-checkpoint 1\n";
  std::istringstream cfg(config_text);
  for (std::string line; std::getline(cfg, line);) manifest << "config " << line << '\n';
  std::string blob;
  std::uint64_t offset = 0;
  auto emit = [&](const std::vector<Parameter>& list, const char* kind) {
    for (const auto& p : list) {
      manifest << kind << ' ' << p.name << ' ' << shape_token(p.tensor.shape()) << ' ' << offset << '\n';
      for (double v : p.tensor.data()) put_le(blob, v);
      offset += static_cast<std::uint64_t>(p.tensor.numel()) * 8;
    }
  };
  emit(params.params(), "param");
  emit(params.buffers(), "buffer");
  manifest << "data " << blob.size() << '\n';

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot write checkpoint " + path.string());
  const std::string head = manifest.str();
  os.write(head.data(), static_cast<std::streamsize>(head.size()));
  os.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!os) throw DataError("failed writing checkpoint " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint " + path.string());
  const std::string where = path.string();
  std::string line;
  if (!std::getline(is, line) || line != "lgfd-checkpoint 1") throw DataError(where + ": not an lgfd checkpoint");

  Checkpoint ckpt;
  std::uint64_t data_bytes = 0;
  bool have_data = false;
  while (!have_data && std::getline(is, line)) {
    const auto sp = line.find(' ');
    const std::string kind = line.substr(0, sp);
    const std::string rest = sp == std::string::npos ? "" : line.substr(sp + 1);
    if (kind == "config") {
      ckpt.config_text += rest + "\n";
    } else if (kind == "param" || kind == "buffer") {
      std::istringstream ls(rest);
      CheckpointEntry e;
      std::string shape;
      if (!(ls >> e.name >> shape >> e.offset)) throw DataError(where + ": malformed manifest line '" + line + "'");
      e.shape = parse_shape(shape, where);
      e.buffer = kind == "buffer";
      ckpt.entries.push_back(std::move(e));
    } else if (kind == "data") {
      data_bytes = std::stoull(rest);
      have_data = true;
    } else {
      throw DataError(where + ": unknown manifest line '" + line + "'");
    }
  }
  if (!have_data) throw DataError(where + ": missing data section");

  std::string blob(data_bytes, '\0');
  is.read(blob.data(), static_cast<std::streamsize>(data_bytes));
  if (static_cast<std::uint64_t>(is.gcount()) != data_bytes) throw DataError(where + ": truncated data section");
  for (auto& e : ckpt.entries) {
    const auto n = static_cast<std::uint64_t>(shape_numel(e.shape));
    if (e.offset + n * 8 > data_bytes) throw DataError(where + ": entry '" + e.name + "' exceeds data section");
    e.values.resize(n);
    for (std::uint64_t i = 0; i < n; ++i) e.values[i] = get_le(blob.data() + e.offset + i * 8);
  }
  return ckpt;
}

void load_into(const Checkpoint& ckpt, ParameterSet& params) {
  auto fill = [&](std::vector<Parameter>& list, bool buffer) {
    for (auto& p : list) {
      const CheckpointEntry* hit = nullptr;
      for (const auto& e : ckpt.entries)
        if (e.name == p.name && e.buffer == buffer) hit = &e;
      if (!hit) throw DataError("checkpoint has no entry for '" + p.name + "'");
      if (hit->shape != p.tensor.shape())
        throw DataError("checkpoint entry '" + p.name + "' has shape " + shape_str(hit->shape) + ", model expects " +
                        shape_str(p.tensor.shape()));
      std::copy(hit->values.begin(), hit->values.end(), p.tensor.data().begin());
    }
  };
  fill(params.params(), false);
  fill(params.buffers(), true);
}

}  // namespace lgfd
