// Copyright (c) 2026 the itervc authors
// SPDX-License-Identifier: Apache-2.0

#include "itervc/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace itervc {

using json = nlohmann::json;

namespace {
constexpr char kMagic[6] = {'I', 'V', 'C', 'K', '1', '\n'};
}

void save_checkpoint(const fs::path& path, const json& header,
                     const std::vector<std::pair<std::string, const Mat*>>& tensors) {
  json h = header;
  json index = json::array();
  uint64_t offset = 0;
  for (const auto& [name, m] : tensors) {
    index.push_back({{"name", name},
                     {"rows", m->rows()},
                     {"cols", m->cols()},
                     {"offset", offset}});
    offset += sizeof(double) * static_cast<uint64_t>(m->size());
  }
  h["tensors"] = index;
  const std::string hs = h.dump();

  std::string out;
  out.reserve(sizeof(kMagic) + 4 + hs.size() + offset);
  out.append(kMagic, sizeof(kMagic));
  const auto hlen = static_cast<uint32_t>(hs.size());
  out.append(reinterpret_cast<const char*>(&hlen), 4);
  out += hs;
  for (const auto& [name, m] : tensors) {
    for (Eigen::Index r = 0; r < m->rows(); ++r)
      for (Eigen::Index c = 0; c < m->cols(); ++c) {
        const double v = (*m)(r, c);
        out.append(reinterpret_cast<const char*>(&v), sizeof(double));
      }
  }
  write_file_atomic(path, out.data(), out.size());
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint: " + path.string());
  char magic[sizeof(kMagic)];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw Error("not an itervc checkpoint: " + path.string());
  uint32_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), 4);
  std::string hs(hlen, '\0');
  in.read(hs.data(), hlen);
  if (!in) throw Error("truncated checkpoint header: " + path.string());

  Checkpoint ck;
  try {
    ck.header = json::parse(hs);
  } catch (const json::exception& e) {
    throw Error("bad checkpoint header in " + path.string() + ": " + e.what());
  }

  std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  for (const auto& t : ck.header.at("tensors")) {
    const auto rows = t.at("rows").get<Eigen::Index>();
    const auto cols = t.at("cols").get<Eigen::Index>();
    const auto offset = t.at("offset").get<uint64_t>();
    const uint64_t bytes = sizeof(double) * static_cast<uint64_t>(rows) * static_cast<uint64_t>(cols);
    if (offset + bytes > blob.size()) throw Error("truncated checkpoint blob: " + path.string());
    Mat m(rows, cols);
    const char* p = blob.data() + offset;
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index c = 0; c < cols; ++c) {
        double v;
        std::memcpy(&v, p, sizeof(double));
        p += sizeof(double);
        m(r, c) = v;
      }
    ck.tensors.emplace(t.at("name").get<std::string>(), std::move(m));
  }
  return ck;
}

}  // namespace itervc
