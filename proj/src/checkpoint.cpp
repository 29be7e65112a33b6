#include <cstring>

#include "famh/train.hpp"

namespace famh::train {

namespace {

void append_u16(std::string& buf, uint16_t v) { buf.append(reinterpret_cast<const char*>(&v), 2); }
void append_u32(std::string& buf, uint32_t v) { buf.append(reinterpret_cast<const char*>(&v), 4); }
void append_u64(std::string& buf, uint64_t v) { buf.append(reinterpret_cast<const char*>(&v), 8); }

void append_tensor(std::string& buf, const std::string& name, const ad::Tensor<float>& t) {
  append_u32(buf, static_cast<uint32_t>(name.size()));
  buf.append(name);
  append_u32(buf, 2);
  append_u64(buf, t.rows);
  append_u64(buf, t.cols);
  buf.append(reinterpret_cast<const char*>(t.v.data()), t.v.size() * sizeof(float));
}

struct Reader {
  const std::string& buf;
  size_t pos = 0;

  void need(size_t n) {
    if (pos + n > buf.size()) raise(Err::truncated_file, "checkpoint truncated");
  }
  template <class V>
  V scalar() {
    need(sizeof(V));
    V v;
    std::memcpy(&v, buf.data() + pos, sizeof(V));
    pos += sizeof(V);
    return v;
  }
};

}  // namespace

void save_checkpoint(const model::MaeParams<float>& params, const AdamState<float>* opt,
                     uint64_t step, uint64_t config_digest, const std::filesystem::path& path) {
  std::string buf = "FAMC";
  append_u16(buf, 1);
  append_u64(buf, config_digest);
  append_u64(buf, step);

  std::vector<std::pair<std::string, const ad::Tensor<float>*>> records;
  model::for_each_tensor(params, [&records](const std::string& name, const ad::Tensor<float>& t) {
    records.emplace_back(name, &t);
  });
  if (opt != nullptr) {
    size_t i = 0;
    model::for_each_tensor(params, [&](const std::string& name, const ad::Tensor<float>&) {
      records.emplace_back("adam.m." + name, &opt->m[i]);
      records.emplace_back("adam.v." + name, &opt->v[i]);
      ++i;
    });
  }
  append_u32(buf, static_cast<uint32_t>(records.size()));
  for (const auto& [name, tensor] : records) append_tensor(buf, name, *tensor);
  write_file_atomic(path, buf);
}

bool LoadedCheckpoint::has_optimizer_state() const {
  for (const auto& [name, tensor] : tensors)
    if (name.rfind("adam.m.", 0) == 0) return true;
  return false;
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::string contents = read_file(path);
  if (contents.size() < 4 || contents.compare(0, 4, "FAMC") != 0)
    raise(Err::bad_magic, "not a FAMC checkpoint: " + path.string());
  Reader r{contents, 4};
  uint16_t version = r.scalar<uint16_t>();
  if (version != 1)
    raise(Err::version_mismatch, "checkpoint version " + std::to_string(version));

  LoadedCheckpoint ck;
  ck.config_digest = r.scalar<uint64_t>();
  ck.step = r.scalar<uint64_t>();
  uint32_t count = r.scalar<uint32_t>();
  for (uint32_t i = 0; i < count; ++i) {
    uint32_t name_len = r.scalar<uint32_t>();
    r.need(name_len);
    std::string name(contents.data() + r.pos, name_len);
    r.pos += name_len;
    uint32_t rank = r.scalar<uint32_t>();
    if (rank != 2) raise(Err::version_mismatch, "unexpected tensor rank in checkpoint");
    uint64_t rows = r.scalar<uint64_t>();
    uint64_t cols = r.scalar<uint64_t>();
    ad::Tensor<float> t(rows, cols);
    r.need(t.size() * sizeof(float));
    std::memcpy(t.v.data(), contents.data() + r.pos, t.size() * sizeof(float));
    r.pos += t.size() * sizeof(float);
    ck.tensors.emplace(std::move(name), std::move(t));
  }
  return ck;
}

void restore_params(const LoadedCheckpoint& ck, model::MaeParams<float>& params,
                    AdamState<float>* opt) {
  auto fetch = [&ck](const std::string& name) -> const ad::Tensor<float>& {
    auto it = ck.tensors.find(name);
    if (it == ck.tensors.end())
      raise(Err::shape_mismatch, "checkpoint is missing tensor '" + name + "'");
    return it->second;
  };
  model::for_each_tensor(params, [&](const std::string& name, ad::Tensor<float>& t) {
    const auto& src = fetch(name);
    if (!t.same_shape(src))
      raise(Err::shape_mismatch,
            "tensor '" + name + "' has shape " + std::to_string(src.rows) + "x" +
                std::to_string(src.cols) + ", config expects " + std::to_string(t.rows) + "x" +
                std::to_string(t.cols));
    t = src;
  });
  if (opt != nullptr) {
    size_t i = 0;
    model::for_each_tensor(params, [&](const std::string& name, ad::Tensor<float>& t) {
      const auto& m = fetch("adam.m." + name);
      const auto& v = fetch("adam.v." + name);
      if (!t.same_shape(m) || !t.same_shape(v))
        raise(Err::shape_mismatch, "optimizer state shape mismatch for '" + name + "'");
      opt->m[i] = m;
      opt->v[i] = v;
      ++i;
    });
    opt->step = ck.step;
  }
}

}  // namespace famh::train
