#include "mdi/checkpoint.hpp"

#include <cstdint>
#include <fstream>

#include "mdi/common.hpp"
#include "mdi/digest.hpp"

namespace mdi {

namespace {

constexpr char kMagic[8] = {'M', 'D', 'I', 'C', 'K', 'P', 'T', '1'};
constexpr std::uint32_t kVersion = 1;

void write_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void write_u64(std::ostream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void write_str(std::ostream& os, const std::string& s) {
  write_u64(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::uint32_t read_u32(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}

std::uint64_t read_u64(std::istream& is) {
  std::uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}

std::string read_str(std::istream& is) {
  std::uint64_t n = read_u64(is);
  check(n <= (1u << 26), "checkpoint: unreasonable string length");
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  return s;
}

}  // namespace

void Checkpoint::add_array(const std::string& name, std::vector<int> shape,
                           std::vector<float> data) {
  std::size_t n = 1;
  for (int d : shape) {
    check(d > 0, "checkpoint: non-positive dim in ", name);
    n *= static_cast<std::size_t>(d);
  }
  check(n == data.size(), "checkpoint: shape/data mismatch in ", name);
  check(!has(name), "checkpoint: duplicate array ", name);
  arrays.push_back({name, std::move(shape), std::move(data)});
}

const NamedArray& Checkpoint::find(const std::string& name) const {
  for (const auto& a : arrays)
    if (a.name == name) return a;
  fail("checkpoint: missing array ", name);
}

bool Checkpoint::has(const std::string& name) const {
  for (const auto& a : arrays)
    if (a.name == name) return true;
  return false;
}

std::string Checkpoint::digest() const {
  Digest d;
  d.str(kind);
  d.str(arch);
  d.str(metadata_json);
  for (const auto& a : arrays) {
    d.str(a.name);
    for (int dim : a.shape) d.pod(dim);
    d.vec(a.data);
  }
  return d.hex();
}

void Checkpoint::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  check(os.good(), "checkpoint: cannot open ", path, " for writing");
  os.write(kMagic, sizeof kMagic);
  write_u32(os, kVersion);
  write_str(os, kind);
  write_str(os, arch);
  write_str(os, metadata_json);
  write_u64(os, arrays.size());
  for (const auto& a : arrays) {
    write_str(os, a.name);
    write_u32(os, static_cast<std::uint32_t>(a.shape.size()));
    for (int d : a.shape) write_u32(os, static_cast<std::uint32_t>(d));
    write_u64(os, a.data.size());
    os.write(reinterpret_cast<const char*>(a.data.data()),
             static_cast<std::streamsize>(a.data.size() * sizeof(float)));
  }
  check(os.good(), "checkpoint: write to ", path, " failed");
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  check(is.good(), "checkpoint: cannot open ", path);
  char magic[8];
  is.read(magic, sizeof magic);
  check(is.good() && std::equal(magic, magic + 8, kMagic),
        "checkpoint: ", path, " is not a checkpoint file");
  std::uint32_t version = read_u32(is);
  check(version == kVersion, "checkpoint: unsupported version ", version);
  Checkpoint ck;
  ck.kind = read_str(is);
  ck.arch = read_str(is);
  ck.metadata_json = read_str(is);
  std::uint64_t count = read_u64(is);
  check(count <= (1u << 20), "checkpoint: unreasonable array count");
  for (std::uint64_t i = 0; i < count; ++i) {
    NamedArray a;
    a.name = read_str(is);
    std::uint32_t ndim = read_u32(is);
    check(ndim <= 8, "checkpoint: unreasonable rank for ", a.name);
    std::size_t n = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      std::uint32_t dim = read_u32(is);
      check(dim > 0 && dim <= (1u << 26), "checkpoint: bad dim for ", a.name);
      a.shape.push_back(static_cast<int>(dim));
      n *= dim;
    }
    std::uint64_t len = read_u64(is);
    check(len == n, "checkpoint: length/shape mismatch for ", a.name);
    a.data.resize(len);
    is.read(reinterpret_cast<char*>(a.data.data()),
            static_cast<std::streamsize>(len * sizeof(float)));
    check(is.good(), "checkpoint: truncated file ", path);
    ck.arrays.push_back(std::move(a));
  }
  return ck;
}

void export_params(const std::vector<nn::Param*>& params, Checkpoint& ck) {
  for (const nn::Param* p : params)
    ck.add_array(p->name, p->shape,
                 std::vector<float>(p->value.begin(), p->value.end()));
}

void import_params(const std::vector<nn::Param*>& params,
                   const Checkpoint& ck) {
  for (nn::Param* p : params) {
    const NamedArray& a = ck.find(p->name);
    check(a.shape == p->shape, "checkpoint: shape mismatch for ", p->name);
    p->value.assign(a.data.begin(), a.data.end());
    p->zero_grad();
  }
}

}  // namespace mdi
