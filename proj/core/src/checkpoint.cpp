#include "dlmlab/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace dlmlab {

namespace {

static_assert(sizeof(float) == 4);

void require_little_endian() {
  if constexpr (std::endian::native != std::endian::little) {
    throw std::runtime_error("checkpoint: big-endian hosts are not supported");
  }
}

void write_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void write_u64(std::ostream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void write_string(std::ostream& os, const std::string& s) {
  write_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::uint32_t read_u32(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

std::uint64_t read_u64(std::istream& is) {
  std::uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

std::string read_string(std::istream& is) {
  const std::uint32_t len = read_u32(is);
  std::string s(len, '\0');
  is.read(s.data(), len);
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return s;
}

}  // namespace

void save_checkpoint(const std::string& path, const Model<float>& model,
                     const std::vector<std::uint8_t>& trailer) {
  require_little_endian();
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");

  os.write(kCheckpointMagic, sizeof kCheckpointMagic);
  write_u32(os, kCheckpointVersion);

  const auto fields = model.spec().to_fields();
  write_u32(os, static_cast<std::uint32_t>(fields.size()));
  for (const auto& [key, value] : fields) write_string(os, key + "=" + value);

  write_u32(os, static_cast<std::uint32_t>(model.params().size()));
  for (const auto& param : model.params()) {
    write_string(os, param.name);
    const Shape& shape = param.tensor.shape();
    write_u32(os, static_cast<std::uint32_t>(shape.size()));
    for (auto extent : shape) write_u64(os, static_cast<std::uint64_t>(extent));
    const auto values = param.tensor.values();
    os.write(reinterpret_cast<const char*>(values.data()),
             static_cast<std::streamsize>(values.size() * sizeof(float)));
  }

  write_u64(os, static_cast<std::uint64_t>(trailer.size()));
  if (!trailer.empty()) {
    os.write(reinterpret_cast<const char*>(trailer.data()),
             static_cast<std::streamsize>(trailer.size()));
  }
  if (!os) throw std::runtime_error("checkpoint: write failed for " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  require_little_endian();
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path);

  char magic[sizeof kCheckpointMagic];
  is.read(magic, sizeof magic);
  if (!is || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) {
    throw std::runtime_error("checkpoint: bad magic in " + path);
  }
  const std::uint32_t version = read_u32(is);
  if (version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  }

  const std::uint32_t n_fields = read_u32(is);
  std::vector<std::pair<std::string, std::string>> fields;
  fields.reserve(n_fields);
  for (std::uint32_t i = 0; i < n_fields; ++i) {
    const std::string line = read_string(is);
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::runtime_error("checkpoint: malformed spec line");
    fields.emplace_back(line.substr(0, eq), line.substr(eq + 1));
  }
  ModelSpec spec = ModelSpec::from_fields(fields);

  Model<float> model(spec, Rng(0));
  const std::uint32_t n_params = read_u32(is);
  if (n_params != model.params().size()) {
    throw std::runtime_error("checkpoint: expected " + std::to_string(model.params().size()) +
                             " parameters, file has " + std::to_string(n_params));
  }
  for (auto& param : model.params()) {
    const std::string name = read_string(is);
    if (name != param.name) {
      throw std::runtime_error("checkpoint: parameter order mismatch, expected " + param.name +
                               " got " + name);
    }
    const std::uint32_t ndim = read_u32(is);
    Shape shape(ndim);
    for (auto& extent : shape) extent = static_cast<std::int64_t>(read_u64(is));
    if (shape != param.tensor.shape()) {
      throw std::runtime_error("checkpoint: shape mismatch for " + name);
    }
    auto values = param.tensor.raw();
    is.read(reinterpret_cast<char*>(values.data()),
            static_cast<std::streamsize>(values.size() * sizeof(float)));
    if (!is) throw std::runtime_error("checkpoint: truncated parameter data for " + name);
  }

  LoadedCheckpoint out{std::move(model), {}};
  const std::uint64_t trailer_len = read_u64(is);
  if (trailer_len > 0) {
    out.trailer.resize(trailer_len);
    is.read(reinterpret_cast<char*>(out.trailer.data()),
            static_cast<std::streamsize>(trailer_len));
    if (!is) throw std::runtime_error("checkpoint: truncated trailer");
  }
  return out;
}

}  // namespace dlmlab
