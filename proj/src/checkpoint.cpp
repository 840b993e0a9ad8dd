#include "mtunet/checkpoint.hpp"

#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "mtunet/error.hpp"

namespace mtunet {

namespace {

constexpr std::array<char, 4> kMagic{'M', 'T', 'U', 'W'};

void put_u32(std::ostream& out, std::uint32_t v) {
  const std::array<char, 4> bytes{static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                                  static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  out.write(bytes.data(), 4);
}

std::uint32_t get_u32(std::istream& in) {
  std::array<unsigned char, 4> b{};
  if (!in.read(reinterpret_cast<char*>(b.data()), 4)) throw DataError("checkpoint truncated");
  return b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void write_checkpoint(std::ostream& out, const Checkpoint& checkpoint) {
  nlohmann::json index = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& nt : checkpoint.tensors) {
    index.push_back({{"name", nt.name}, {"shape", nt.tensor.shape()}, {"offset", offset}});
    offset += nt.tensor.numel() * sizeof(float);
  }
  const std::string header = nlohmann::json{{"config", checkpoint.config}, {"tensors", index}}.dump();

  out.write(kMagic.data(), kMagic.size());
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(header.size()));
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (const auto& nt : checkpoint.tensors) {
    for (double v : nt.tensor.data()) {
      const auto f = static_cast<float>(v);
      if (!std::isfinite(f)) throw NumericError("checkpoint value of '" + nt.name + "' not representable as f32");
      put_u32(out, std::bit_cast<std::uint32_t>(f));
    }
  }
  if (!out) throw DataError("failed writing checkpoint");
}

Checkpoint read_checkpoint(std::istream& in) {
  std::array<char, 4> magic{};
  if (!in.read(magic.data(), 4) || magic != kMagic) throw DataError("not an MTUW checkpoint");
  const std::uint32_t version = get_u32(in);
  if (version != kCheckpointVersion) throw DataError("unsupported checkpoint version " + std::to_string(version));
  const std::uint32_t header_len = get_u32(in);
  std::string header(header_len, '\0');
  if (!in.read(header.data(), header_len)) throw DataError("checkpoint header truncated");

  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(header);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint header: ") + e.what());
  }
  std::vector<char> blob{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};

  Checkpoint ck;
  ck.config = meta.value("config", nlohmann::json::object());
  for (const auto& entry : meta.at("tensors")) {
    Shape shape = entry.at("shape").get<Shape>();
    const auto offset = entry.at("offset").get<std::uint64_t>();
    const std::size_t n = shape_numel(shape);
    if (offset + n * sizeof(float) > blob.size()) throw DataError("checkpoint blob truncated");
    std::vector<double> values(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto* p = reinterpret_cast<const unsigned char*>(blob.data() + offset + i * sizeof(float));
      const std::uint32_t bits = p[0] | (p[1] << 8) | (p[2] << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
      values[i] = static_cast<double>(std::bit_cast<float>(bits));
    }
    ck.tensors.push_back({entry.at("name").get<std::string>(), Tensor(std::move(shape), std::move(values))});
  }
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  const auto tmp = std::filesystem::path(path).concat(".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw DataError("cannot open " + tmp.string());
    write_checkpoint(out, checkpoint);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  return read_checkpoint(in);
}

}  // namespace mtunet
