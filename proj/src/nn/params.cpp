#include "framefuse/nn/params.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace framefuse::nn {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format is little-endian; big-endian hosts are unsupported");

Parameter& ParameterStore::create(const std::string& name, int rows, int cols) {
  if (by_name_.count(name)) throw InputError("parameter already registered: " + name);
  params_.emplace_back();
  Parameter& p = params_.back();
  p.name = name;
  p.value = Eigen::MatrixXd::Zero(rows, cols);
  p.grad = Eigen::MatrixXd::Zero(rows, cols);
  by_name_.emplace(name, &p);
  return p;
}

Parameter* ParameterStore::find(const std::string& name) {
  auto it = by_name_.find(name);
  return it == by_name_.end() ? nullptr : it->second;
}

const Parameter* ParameterStore::find(const std::string& name) const {
  auto it = by_name_.find(name);
  return it == by_name_.end() ? nullptr : it->second;
}

Parameter& ParameterStore::at(const std::string& name) {
  Parameter* p = find(name);
  if (!p) throw InputError("unknown parameter: " + name);
  return *p;
}

long ParameterStore::scalar_count() const {
  long n = 0;
  for (const Parameter& p : params_) n += static_cast<long>(p.value.size());
  return n;
}

void ParameterStore::zero_grads() {
  for (Parameter& p : params_) p.grad.setZero();
}

void init_params(ParameterStore& store, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 0.02);
  auto trunc = [&] {
    double x = normal(rng);
    while (std::abs(x) > 2.0 * 0.02) x = normal(rng);
    return x;
  };
  for (Parameter& p : store) {
    if (p.name.ends_with("/b") || p.name.ends_with("/bias")) {
      p.value.setZero();
    } else if (p.name.ends_with("/gain")) {
      p.value.setOnes();
    } else {
      for (Eigen::Index r = 0; r < p.value.rows(); ++r)
        for (Eigen::Index c = 0; c < p.value.cols(); ++c) p.value(r, c) = trunc();
    }
  }
}

namespace {

constexpr char kMagic[4] = {'P', 'M', 'S', 'L'};
constexpr std::uint32_t kVersion = 1;
constexpr const char* kKindTensor = "__model_kind__";

template <typename T>
void write_raw(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_raw(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw InputError("checkpoint: truncated file");
  return v;
}

void write_tensor(std::ostream& os, const std::string& name, std::uint8_t rank,
                  const std::vector<std::uint32_t>& dims, const std::vector<float>& data) {
  if (name.size() > 0xffff) throw InputError("checkpoint: tensor name too long");
  write_raw<std::uint16_t>(os, static_cast<std::uint16_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  write_raw<std::uint8_t>(os, rank);
  for (std::uint32_t d : dims) write_raw<std::uint32_t>(os, d);
  os.write(reinterpret_cast<const char*>(data.data()),
           static_cast<std::streamsize>(data.size() * sizeof(float)));
}

}  // namespace

void save_checkpoint(const std::string& path, const std::string& kind,
                     const ParameterStore& store) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw InputError("checkpoint: cannot open for writing: " + path);
  os.write(kMagic, 4);
  write_raw<std::uint32_t>(os, kVersion);
  write_raw<std::uint32_t>(os, static_cast<std::uint32_t>(store.size() + 1));

  std::vector<float> kind_data(kind.begin(), kind.end());
  write_tensor(os, kKindTensor, 1, {static_cast<std::uint32_t>(kind.size())}, kind_data);

  for (const Parameter& p : store) {
    std::vector<float> data(static_cast<std::size_t>(p.value.size()));
    std::size_t i = 0;
    for (Eigen::Index r = 0; r < p.value.rows(); ++r)
      for (Eigen::Index c = 0; c < p.value.cols(); ++c) data[i++] = static_cast<float>(p.value(r, c));
    write_tensor(os, p.name, 2,
                 {static_cast<std::uint32_t>(p.value.rows()),
                  static_cast<std::uint32_t>(p.value.cols())},
                 data);
  }
  if (!os) throw InputError("checkpoint: write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("checkpoint: cannot open: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw InputError("checkpoint: bad magic in " + path);
  std::uint32_t version = read_raw<std::uint32_t>(is);
  if (version != kVersion) throw InputError("checkpoint: unsupported version");
  std::uint32_t count = read_raw<std::uint32_t>(is);

  Checkpoint ckpt;
  for (std::uint32_t t = 0; t < count; ++t) {
    std::uint16_t name_len = read_raw<std::uint16_t>(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    std::uint8_t rank = read_raw<std::uint8_t>(is);
    std::vector<std::uint32_t> dims(rank);
    std::size_t total = 1;
    for (std::uint8_t r = 0; r < rank; ++r) {
      dims[r] = read_raw<std::uint32_t>(is);
      total *= dims[r];
    }
    std::vector<float> data(total);
    is.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(total * sizeof(float)));
    if (!is) throw InputError("checkpoint: truncated tensor data in " + path);

    if (name == kKindTensor) {
      ckpt.kind.assign(data.size(), '\0');
      for (std::size_t i = 0; i < data.size(); ++i) ckpt.kind[i] = static_cast<char>(data[i]);
      continue;
    }
    Eigen::Index rows = rank >= 1 ? dims[0] : 1;
    Eigen::Index cols = rank >= 2 ? dims[1] : 1;
    if (rank > 2) throw InputError("checkpoint: tensors above rank 2 are not used: " + name);
    Eigen::MatrixXd m(rows, cols);
    std::size_t i = 0;
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = static_cast<double>(data[i++]);
    ckpt.tensors.emplace_back(std::move(name), std::move(m));
  }
  return ckpt;
}

void apply_checkpoint(const Checkpoint& ckpt, ParameterStore& store,
                      const std::string& expected_kind) {
  if (!expected_kind.empty() && ckpt.kind != expected_kind)
    throw InputError("checkpoint: kind mismatch (have '" + ckpt.kind + "', want '" +
                     expected_kind + "')");
  std::size_t applied = 0;
  for (const auto& [name, m] : ckpt.tensors) {
    Parameter* p = store.find(name);
    if (!p) throw InputError("checkpoint: tensor has no matching parameter: " + name);
    if (p->value.rows() != m.rows() || p->value.cols() != m.cols())
      throw InputError("checkpoint: shape mismatch for " + name);
    p->value = m;
    ++applied;
  }
  if (applied != store.size())
    throw InputError("checkpoint: missing tensors (store expects " +
                     std::to_string(store.size()) + ", file has " + std::to_string(applied) + ")");
}

}  // namespace framefuse::nn
