#include "mdi/dataset.hpp"

#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

namespace mdi {

using nlohmann::json;

const char* provenance_name(Provenance p) {
  switch (p) {
    case Provenance::real: return "real";
    case Provenance::gan_generated: return "gan_generated";
    case Provenance::reconstructed: return "reconstructed";
    case Provenance::mitigated: return "mitigated";
  }
  return "unknown";
}

Provenance provenance_from_name(const std::string& s) {
  if (s == "real") return Provenance::real;
  if (s == "gan_generated") return Provenance::gan_generated;
  if (s == "reconstructed") return Provenance::reconstructed;
  if (s == "mitigated") return Provenance::mitigated;
  fail("unknown provenance: ", s);
}

void LabeledDataset::validate() const {
  check(images.c() == 1 && images.h() == kImageSize && images.w() == kImageSize,
        "dataset '", source_id, "': images must be ", kImageSize, "x",
        kImageSize, "x1");
  check(images.n() == int(labels.size()), "dataset '", source_id,
        "': images/labels length mismatch (", images.n(), " vs ",
        labels.size(), ")");
  for (std::size_t i = 0; i < labels.size(); ++i)
    check(labels[i] >= 0 && labels[i] < kNumClasses, "dataset '", source_id,
          "': label out of range at index ", i);
  const bool bounded = provenance != Provenance::mitigated;
  const float* p = images.data();
  for (std::size_t i = 0; i < images.size(); ++i) {
    check(std::isfinite(p[i]), "dataset '", source_id,
          "': non-finite pixel at offset ", i);
    if (bounded)
      check(p[i] >= -1.0f && p[i] <= 1.0f, "dataset '", source_id,
            "': pixel out of [-1,1] at offset ", i, " (", p[i], ")");
  }
}

std::vector<std::vector<int>> LabeledDataset::per_class_indices() const {
  std::vector<std::vector<int>> by_class(kNumClasses);
  for (int i = 0; i < size(); ++i) by_class[std::size_t(labels[std::size_t(i)])].push_back(i);
  return by_class;
}

std::vector<int> LabeledDataset::present_classes() const {
  auto by_class = per_class_indices();
  std::vector<int> out;
  for (int c = 0; c < kNumClasses; ++c)
    if (!by_class[std::size_t(c)].empty()) out.push_back(c);
  return out;
}

LabeledDataset LabeledDataset::subset(const std::vector<int>& idx) const {
  LabeledDataset out;
  out.images = images.gather(idx);
  out.labels.reserve(idx.size());
  for (int i : idx) out.labels.push_back(labels[std::size_t(i)]);
  out.source_id = source_id;
  out.provenance = provenance;
  out.origin_digest = origin_digest;
  out.origin_parent_digest = origin_parent_digest;
  return out;
}

std::string LabeledDataset::digest() const {
  Digest d;
  images.add_digest(d);
  d.vec(labels);
  d.pod(std::uint8_t(provenance));
  return d.hex();
}

DatasetManifest make_manifest(const LabeledDataset& ds,
                              const std::map<int, int>& class_map,
                              const std::string& normalization) {
  DatasetManifest m;
  m.source_id = ds.source_id;
  m.class_map = class_map;
  m.per_class_count.assign(kNumClasses, 0);
  for (int l : ds.labels) m.per_class_count[std::size_t(l)]++;
  m.normalization = normalization;
  m.content_digest = ds.digest();
  m.provenance = provenance_name(ds.provenance);
  m.origin_digest = ds.origin_digest;
  m.origin_parent_digest = ds.origin_parent_digest;
  return m;
}

namespace {

constexpr char kMagic[8] = {'M', 'D', 'I', 'D', 'S', 'E', 'T', '1'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T v;
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  check(bool(is), "dataset file: truncated read");
  return v;
}

void write_string(std::ostream& os, const std::string& s) {
  write_pod<std::uint32_t>(os, std::uint32_t(s.size()));
  os.write(s.data(), std::streamsize(s.size()));
}

std::string read_string(std::istream& is) {
  auto n = read_pod<std::uint32_t>(is);
  std::string s(n, '\0');
  is.read(s.data(), std::streamsize(n));
  check(bool(is), "dataset file: truncated string");
  return s;
}

}  // namespace

void save_dataset(const LabeledDataset& ds, const std::string& path,
                  const DatasetManifest* manifest) {
  ds.validate();
  std::ofstream os(path, std::ios::binary);
  check(bool(os), "cannot open for write: ", path);
  os.write(kMagic, sizeof(kMagic));
  write_pod<std::uint32_t>(os, kVersion);
  write_pod<std::uint32_t>(os, std::uint32_t(ds.size()));
  write_pod<std::uint32_t>(os, std::uint32_t(ds.images.h()));
  write_pod<std::uint32_t>(os, std::uint32_t(ds.images.w()));
  write_pod<std::uint32_t>(os, std::uint32_t(ds.images.c()));
  write_pod<std::uint32_t>(os, 1);  // label width in bytes
  write_pod<std::uint8_t>(os, std::uint8_t(ds.provenance));
  write_string(os, ds.source_id);
  write_string(os, ds.origin_digest);
  write_string(os, ds.origin_parent_digest);
  os.write(reinterpret_cast<const char*>(ds.images.data()),
           std::streamsize(ds.images.size() * sizeof(float)));
  for (int l : ds.labels) write_pod<std::uint8_t>(os, std::uint8_t(l));
  check(bool(os), "write failed: ", path);

  DatasetManifest local;
  if (!manifest) {
    local = make_manifest(ds, {}, "");
    manifest = &local;
  }
  json j;
  j["source_id"] = manifest->source_id;
  j["class_map"] = json::object();
  for (auto& [orig, unified] : manifest->class_map)
    j["class_map"][std::to_string(orig)] = unified;
  j["per_class_count"] = manifest->per_class_count;
  j["normalization"] = manifest->normalization;
  j["content_digest"] = manifest->content_digest;
  j["provenance"] = manifest->provenance;
  j["origin_digest"] = manifest->origin_digest;
  j["origin_parent_digest"] = manifest->origin_parent_digest;
  std::ofstream ms(path + ".json");
  check(bool(ms), "cannot open for write: ", path + ".json");
  ms << j.dump(2) << "\n";
}

LabeledDataset load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  check(bool(is), "cannot open dataset: ", path);
  char magic[8];
  is.read(magic, sizeof(magic));
  check(bool(is) && std::memcmp(magic, kMagic, sizeof(kMagic)) == 0,
        "not a packed dataset file: ", path);
  auto version = read_pod<std::uint32_t>(is);
  check(version == kVersion, "unsupported dataset version ", version);
  auto n = read_pod<std::uint32_t>(is);
  auto h = read_pod<std::uint32_t>(is);
  auto w = read_pod<std::uint32_t>(is);
  auto c = read_pod<std::uint32_t>(is);
  auto label_width = read_pod<std::uint32_t>(is);
  check(label_width == 1, "unsupported label width ", label_width);
  auto prov = read_pod<std::uint8_t>(is);

  LabeledDataset ds;
  ds.provenance = Provenance(prov);
  ds.source_id = read_string(is);
  ds.origin_digest = read_string(is);
  ds.origin_parent_digest = read_string(is);
  ds.images = Tensor(int(n), int(c), int(h), int(w));
  is.read(reinterpret_cast<char*>(ds.images.data()),
          std::streamsize(ds.images.size() * sizeof(float)));
  check(bool(is), "dataset file: truncated image block");
  ds.labels.resize(n);
  for (auto& l : ds.labels) l = int(read_pod<std::uint8_t>(is));
  ds.validate();
  return ds;
}

}  // namespace mdi
