#include "pva/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace pva {

namespace {

constexpr char kMagic[4] = {'P', 'V', 'A', 'M'};
constexpr uint32_t kVersion = 1;

void put(std::ofstream& os, const void* p, size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

void get(std::ifstream& is, void* p, size_t n, const char* what) {
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<size_t>(is.gcount()) != n)
    throw FormatError(std::string("truncated checkpoint while reading ") + what);
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const PvaModel& model) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  put(os, kMagic, 4);
  put(os, &kVersion, 4);
  const uint64_t digest = model.config().digest();
  put(os, &digest, 8);
  const std::string cfg = model.config().serialize();
  const uint32_t cfg_len = static_cast<uint32_t>(cfg.size());
  put(os, &cfg_len, 4);
  put(os, cfg.data(), cfg.size());
  for (const Parameter& p : model.parameters()) {
    const uint32_t name_len = static_cast<uint32_t>(p.name.size());
    put(os, &name_len, 4);
    put(os, p.name.data(), p.name.size());
    const uint32_t rank = static_cast<uint32_t>(p.tensor.rank());
    put(os, &rank, 4);
    for (int i = 0; i < p.tensor.rank(); ++i) {
      const uint32_t d = static_cast<uint32_t>(p.tensor.dim(i));
      put(os, &d, 4);
    }
    put(os, p.tensor.data(), static_cast<size_t>(p.tensor.numel()) * 8);
  }
  if (!os) throw FormatError("failed writing " + path.string());
}

PvaModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint " + path.string());
  char magic[4];
  get(is, magic, 4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0)
    throw FormatError("bad magic in " + path.string() + ": not a PVAM checkpoint");
  uint32_t version = 0;
  get(is, &version, 4, "version");
  if (version != kVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  uint64_t digest = 0;
  get(is, &digest, 8, "digest");
  uint32_t cfg_len = 0;
  get(is, &cfg_len, 4, "config length");
  if (cfg_len > (1u << 20)) throw FormatError("implausible config block size");
  std::string cfg_text(cfg_len, '\0');
  get(is, cfg_text.data(), cfg_len, "config");
  const PvaConfig cfg = PvaConfig::deserialize(cfg_text);
  if (cfg.digest() != digest)
    throw FormatError("checkpoint config digest mismatch in " + path.string());

  PvaModel model(cfg, 0);
  size_t loaded = 0;
  for (;;) {
    uint32_t name_len = 0;
    is.read(reinterpret_cast<char*>(&name_len), 4);
    if (is.gcount() == 0) break;  // clean EOF
    if (is.gcount() != 4) throw FormatError("truncated checkpoint while reading name length");
    if (name_len > 4096) throw FormatError("implausible parameter name length");
    std::string name(name_len, '\0');
    get(is, name.data(), name_len, "name");
    uint32_t rank = 0;
    get(is, &rank, 4, "rank");
    if (rank > 8) throw FormatError("implausible tensor rank");
    std::vector<int64_t> dims(rank);
    int64_t numel = 1;
    for (uint32_t i = 0; i < rank; ++i) {
      uint32_t d = 0;
      get(is, &d, 4, "dims");
      dims[i] = d;
      numel *= d;
    }
    Parameter& p = model.parameter(name);
    if (p.tensor.shape() != dims)
      throw FormatError("checkpoint shape mismatch for '" + name + "': stored " +
                        shape_string(dims) + ", model expects " +
                        shape_string(p.tensor.shape()));
    get(is, p.tensor.data(), static_cast<size_t>(numel) * 8, "payload");
    ++loaded;
  }
  if (loaded != model.parameters().size())
    throw FormatError("checkpoint holds " + std::to_string(loaded) + " tensors, model has " +
                      std::to_string(model.parameters().size()));
  return model;
}

PvaModel load_checkpoint(const std::filesystem::path& path, const PvaConfig& expected) {
  PvaModel model = load_checkpoint(path);
  if (model.config().digest() != expected.digest())
    throw FormatError("checkpoint " + path.string() +
                      " was written under a different configuration");
  return model;
}

}  // namespace pva
