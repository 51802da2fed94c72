#pragma once

/// @file datamodel.hpp
/// @brief Hierarchical in-memory data objects: groups, typed n-d datasets,
///        hyperslab selections, block decomposition, and a flat container
///        serialization used for file-mode transport.

#include <bit>
#include <cstdint>
#include <cstring>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

namespace situ {

static_assert(std::endian::native == std::endian::little,
              "container payloads are little-endian; big-endian hosts unsupported");

/// Base error for all engine failures.
class Error : public std::runtime_error {
public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// ---------------------------------------------------------------------------
// scalar types

enum class DType : uint8_t { U8, I32, I64, U64, F32, F64 };

inline size_t dtype_size(DType t) {
  switch (t) {
    case DType::U8: return 1;
    case DType::I32: case DType::F32: return 4;
    default: return 8;
  }
}

inline std::string_view dtype_name(DType t) {
  switch (t) {
    case DType::U8: return "u8";
    case DType::I32: return "i32";
    case DType::I64: return "i64";
    case DType::U64: return "u64";
    case DType::F32: return "f32";
    case DType::F64: return "f64";
  }
  return "?";
}

inline std::optional<DType> dtype_from_name(std::string_view s) {
  if (s == "u8") return DType::U8;
  if (s == "i32") return DType::I32;
  if (s == "i64") return DType::I64;
  if (s == "u64") return DType::U64;
  if (s == "f32") return DType::F32;
  if (s == "f64") return DType::F64;
  return std::nullopt;
}

template <class T> struct dtype_of;
template <> struct dtype_of<uint8_t>  { static constexpr DType value = DType::U8; };
template <> struct dtype_of<int32_t>  { static constexpr DType value = DType::I32; };
template <> struct dtype_of<int64_t>  { static constexpr DType value = DType::I64; };
template <> struct dtype_of<uint64_t> { static constexpr DType value = DType::U64; };
template <> struct dtype_of<float>    { static constexpr DType value = DType::F32; };
template <> struct dtype_of<double>   { static constexpr DType value = DType::F64; };

// ---------------------------------------------------------------------------
// selections

/// Rectangular hyperslab: per-dimension offset and count, row-major order.
struct Selection {
  std::vector<uint64_t> offset;
  std::vector<uint64_t> count;

  static Selection full(const std::vector<uint64_t>& extents) {
    return Selection{std::vector<uint64_t>(extents.size(), 0), extents};
  }
  size_t rank() const { return count.size(); }
  uint64_t elements() const {
    uint64_t n = 1;
    for (uint64_t c : count) n *= c;
    return count.empty() ? 0 : n;
  }
  bool empty() const { return elements() == 0; }
  bool operator==(const Selection&) const = default;
};

/// Per-dimension overlap of two selections of equal rank (may be empty).
inline Selection intersect(const Selection& a, const Selection& b) {
  if (a.rank() != b.rank()) throw Error("intersect: selection rank mismatch");
  Selection r;
  r.offset.resize(a.rank());
  r.count.resize(a.rank());
  for (size_t d = 0; d < a.rank(); ++d) {
    uint64_t lo = std::max(a.offset[d], b.offset[d]);
    uint64_t hi = std::min(a.offset[d] + a.count[d], b.offset[d] + b.count[d]);
    r.offset[d] = lo;
    r.count[d] = hi > lo ? hi - lo : 0;
  }
  return r;
}

/// Split the leading dimension into @p nparts contiguous blocks. The first
/// (extents[0] mod nparts) parts get the ceiling share, the rest the floor
/// share; parts beyond extents[0] come out empty. Non-leading dimensions are
/// kept whole. The parts partition the full index space.
inline std::vector<Selection> decompose(const std::vector<uint64_t>& extents, int nparts) {
  if (extents.empty()) throw Error("decompose: zero-rank extents");
  if (nparts < 1) throw Error("decompose: nparts must be positive");
  std::vector<Selection> parts;
  parts.reserve(nparts);
  const uint64_t rows = extents[0];
  const uint64_t base = rows / nparts, rem = rows % nparts;
  uint64_t off = 0;
  for (int i = 0; i < nparts; ++i) {
    uint64_t cnt = base + (static_cast<uint64_t>(i) < rem ? 1 : 0);
    Selection s = Selection::full(extents);
    s.offset[0] = off;
    s.count[0] = cnt;
    parts.push_back(std::move(s));
    off += cnt;
  }
  return parts;
}

// ---------------------------------------------------------------------------
// trees

/// One file's worth of hierarchical data: groups with ordered children and
/// typed row-major datasets of rank 1..4. Paths are absolute, '/'-separated.
class DataTree {
public:
  struct DatasetRec {
    DType dtype{};
    std::vector<uint64_t> extents;
    std::vector<std::byte> data;  // full row-major buffer
    bool operator==(const DatasetRec&) const = default;
  };

  struct Entry {
    std::string path;  // "/a/b"
    bool is_group{};
    const DatasetRec* dset{};  // null for groups
  };

  DataTree() { nodes_.push_back(Node{GroupRec{}}); }

  /// Creates a zero-filled dataset, auto-creating parent groups.
  DatasetRec& create_dataset(const std::string& path, DType dtype,
                             const std::vector<uint64_t>& extents) {
    if (extents.empty() || extents.size() > 4)
      throw Error("create_dataset: rank must be 1..4: " + path);
    auto [parent, leaf] = split_path(path);
    int gid = ensure_group(parent);
    if (child_of(gid, leaf) >= 0) throw Error("create_dataset: path exists: " + path);
    DatasetRec d;
    d.dtype = dtype;
    d.extents = extents;
    uint64_t n = 1;
    for (uint64_t e : extents) n *= e;
    d.data.assign(n * dtype_size(dtype), std::byte{0});
    nodes_.push_back(Node{std::move(d)});
    int id = static_cast<int>(nodes_.size()) - 1;
    std::get<GroupRec>(nodes_[gid].v).children.emplace_back(leaf, id);
    return std::get<DatasetRec>(nodes_[id].v);
  }

  DatasetRec* find_dataset(const std::string& path) {
    int id = find_node(path);
    if (id < 0 || !std::holds_alternative<DatasetRec>(nodes_[id].v)) return nullptr;
    return &std::get<DatasetRec>(nodes_[id].v);
  }
  const DatasetRec* find_dataset(const std::string& path) const {
    return const_cast<DataTree*>(this)->find_dataset(path);
  }

  DatasetRec& dataset(const std::string& path) {
    if (auto* d = find_dataset(path)) return *d;
    throw Error("no such dataset: " + path);
  }
  const DatasetRec& dataset(const std::string& path) const {
    return const_cast<DataTree*>(this)->dataset(path);
  }

  /// Copies @p src (row-major, sized for @p sel) into the selected region.
  void write_selection(const std::string& path, const Selection& sel,
                       const void* src, size_t src_bytes) {
    auto& d = dataset(path);
    check_sel(d, sel, path);
    const size_t need = sel.elements() * dtype_size(d.dtype);
    if (src_bytes != need)
      throw Error("write_selection: buffer size mismatch on " + path);
    walk_rows(d, sel, [&](std::byte* dst, const size_t row_bytes, size_t row_idx) {
      std::memcpy(dst, static_cast<const std::byte*>(src) + row_idx * row_bytes, row_bytes);
    });
  }

  /// Reads the selected region into a fresh row-major buffer.
  std::vector<std::byte> read_selection(const std::string& path, const Selection& sel) const {
    const auto& d = dataset(path);
    check_sel(d, sel, path);
    std::vector<std::byte> out(sel.elements() * dtype_size(d.dtype));
    const_cast<DataTree*>(this)->walk_rows(
        const_cast<DatasetRec&>(d), sel,
        [&](std::byte* src, const size_t row_bytes, size_t row_idx) {
          std::memcpy(out.data() + row_idx * row_bytes, src, row_bytes);
        });
    return out;
  }

  /// Deterministic pre-order listing (children in creation order); the root
  /// group itself is not listed.
  std::vector<Entry> list() const {
    std::vector<Entry> out;
    list_rec(0, "", out);
    return out;
  }

  /// Drops every dataset and non-root group, keeping the tree open/usable.
  void clear() {
    nodes_.clear();
    nodes_.push_back(Node{GroupRec{}});
  }

  /// Creates the group at @p path (and parents) if absent.
  void ensure_group_path(const std::string& path) { ensure_group(path); }

  bool empty() const { return std::get<GroupRec>(nodes_[0].v).children.empty(); }

  bool operator==(const DataTree& o) const {
    auto a = list(), b = o.list();
    if (a.size() != b.size()) return false;
    for (size_t i = 0; i < a.size(); ++i) {
      if (a[i].path != b[i].path || a[i].is_group != b[i].is_group) return false;
      if (!a[i].is_group && !(*a[i].dset == *b[i].dset)) return false;
    }
    return true;
  }

private:
  struct GroupRec {
    std::vector<std::pair<std::string, int>> children;  // creation order
  };
  struct Node {
    std::variant<GroupRec, DatasetRec> v;
  };
  std::vector<Node> nodes_;  // 0 = root group

  static std::pair<std::string, std::string> split_path(const std::string& path) {
    if (path.empty() || path[0] != '/' || path.back() == '/')
      throw Error("bad dataset path: '" + path + "'");
    size_t cut = path.rfind('/');
    return {path.substr(0, cut), path.substr(cut + 1)};
  }

  int child_of(int gid, const std::string& name) const {
    for (const auto& [n, id] : std::get<GroupRec>(nodes_[gid].v).children)
      if (n == name) return id;
    return -1;
  }

  int ensure_group(const std::string& parent) {
    int cur = 0;
    size_t pos = 1;
    while (pos <= parent.size()) {
      size_t next = parent.find('/', pos);
      if (next == std::string::npos) next = parent.size();
      std::string name = parent.substr(pos, next - pos);
      if (!name.empty()) {
        int c = child_of(cur, name);
        if (c < 0) {
          nodes_.push_back(Node{GroupRec{}});
          c = static_cast<int>(nodes_.size()) - 1;
          std::get<GroupRec>(nodes_[cur].v).children.emplace_back(name, c);
        } else if (!std::holds_alternative<GroupRec>(nodes_[c].v)) {
          throw Error("path component is a dataset: " + parent);
        }
        cur = c;
      }
      pos = next + 1;
    }
    return cur;
  }

  int find_node(const std::string& path) const {
    if (path.empty() || path[0] != '/') return -1;
    int cur = 0;
    size_t pos = 1;
    while (pos <= path.size()) {
      size_t next = path.find('/', pos);
      if (next == std::string::npos) next = path.size();
      std::string name = path.substr(pos, next - pos);
      if (!name.empty()) {
        cur = child_of(cur, name);
        if (cur < 0) return -1;
      }
      pos = next + 1;
    }
    return cur;
  }

  static void check_sel(const DatasetRec& d, const Selection& sel, const std::string& path) {
    if (sel.rank() != d.extents.size())
      throw Error("selection rank mismatch on " + path);
    for (size_t i = 0; i < sel.rank(); ++i)
      if (sel.offset[i] + sel.count[i] > d.extents[i])
        throw Error("selection out of bounds on " + path);
  }

  /// Visits each contiguous row-run of the selection; the run length is the
  /// innermost selected count.
  template <class F>
  void walk_rows(DatasetRec& d, const Selection& sel, F&& f) {
    const size_t rank = sel.rank();
    const size_t dsize = dtype_size(d.dtype);
    // element strides of the full buffer
    std::vector<uint64_t> stride(rank, 1);
    for (size_t i = rank - 1; i > 0; --i) stride[i - 1] = stride[i] * d.extents[i];
    const size_t row_elems = sel.count[rank - 1];
    const size_t row_bytes = row_elems * dsize;
    if (sel.empty()) return;
    std::vector<uint64_t> idx(rank, 0);  // index within the selection, last dim fixed 0
    size_t row = 0;
    while (true) {
      uint64_t base = 0;
      for (size_t i = 0; i < rank; ++i) base += (sel.offset[i] + idx[i]) * stride[i];
      f(d.data.data() + base * dsize, row_bytes, row++);
      // odometer over all but the last dimension
      size_t i = rank - 1;
      while (true) {
        if (i == 0) return;
        --i;
        if (++idx[i] < sel.count[i]) break;
        idx[i] = 0;
      }
    }
  }

  void list_rec(int gid, const std::string& prefix, std::vector<Entry>& out) const {
    for (const auto& [name, id] : std::get<GroupRec>(nodes_[gid].v).children) {
      std::string p = prefix + "/" + name;
      if (std::holds_alternative<GroupRec>(nodes_[id].v)) {
        out.push_back(Entry{p, true, nullptr});
        list_rec(id, p, out);
      } else {
        out.push_back(Entry{p, false, &std::get<DatasetRec>(nodes_[id].v)});
      }
    }
  }
};

// ---------------------------------------------------------------------------
// typed helpers

template <class T>
void write_full(DataTree& t, const std::string& path, const std::vector<T>& vals) {
  auto& d = t.dataset(path);
  t.write_selection(path, Selection::full(d.extents), vals.data(), vals.size() * sizeof(T));
}

template <class T>
std::vector<T> read_as(const DataTree& t, const std::string& path, const Selection& sel) {
  auto raw = t.read_selection(path, sel);
  std::vector<T> out(raw.size() / sizeof(T));
  std::memcpy(out.data(), raw.data(), raw.size());
  return out;
}

// ---------------------------------------------------------------------------
// container serialization
//
// Layout: "WLK1" magic · u32 LE manifest length · manifest JSON (UTF-8) ·
// zero padding to 8-byte alignment · dataset payloads, scalars little-endian.
// Manifest offsets are relative to the payload base (the aligned position
// right after the manifest), so each payload also starts 8-byte aligned in
// the container as a whole.

inline constexpr char container_magic[4] = {'W', 'L', 'K', '1'};
inline constexpr int container_version = 1;

inline std::vector<std::byte> serialize_tree(const DataTree& tree) {
  auto entries = tree.list();
  nlohmann::json m;
  m["version"] = container_version;
  nlohmann::json arr = nlohmann::json::array();
  size_t pos = 0;  // relative to payload base
  std::vector<size_t> offs;
  for (const auto& e : entries) {
    nlohmann::json n;
    n["path"] = e.path;
    if (e.is_group) {
      n["kind"] = "group";
    } else {
      n["kind"] = "dataset";
      n["dtype"] = std::string(dtype_name(e.dset->dtype));
      n["extents"] = e.dset->extents;
      n["offset"] = pos;
      n["bytes"] = e.dset->data.size();
      offs.push_back(pos);
      pos = (pos + e.dset->data.size() + 7) / 8 * 8;
    }
    arr.push_back(std::move(n));
  }
  m["nodes"] = std::move(arr);
  const std::string manifest = m.dump();
  const size_t base = (8 + manifest.size() + 7) / 8 * 8;
  std::vector<std::byte> out(base + pos, std::byte{0});
  std::memcpy(out.data(), container_magic, 4);
  uint32_t mlen = static_cast<uint32_t>(manifest.size());
  std::memcpy(out.data() + 4, &mlen, 4);
  std::memcpy(out.data() + 8, manifest.data(), manifest.size());
  size_t di = 0;
  for (const auto& e : entries) {
    if (e.is_group) continue;
    std::memcpy(out.data() + base + offs[di], e.dset->data.data(), e.dset->data.size());
    ++di;
  }
  return out;
}

inline DataTree deserialize_tree(const std::byte* bytes, size_t len) {
  if (len < 8 || std::memcmp(bytes, container_magic, 4) != 0)
    throw Error("container: bad magic");
  uint32_t mlen;
  std::memcpy(&mlen, bytes + 4, 4);
  if (8 + static_cast<size_t>(mlen) > len) throw Error("container: truncated manifest");
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(std::string_view(reinterpret_cast<const char*>(bytes) + 8, mlen));
  } catch (const std::exception& e) {
    throw Error(std::string("container: manifest parse: ") + e.what());
  }
  if (m.value("version", 0) != container_version) throw Error("container: bad version");
  const size_t base = (8 + static_cast<size_t>(mlen) + 7) / 8 * 8;
  DataTree t;
  for (const auto& n : m.at("nodes")) {
    const std::string path = n.at("path").get<std::string>();
    if (n.at("kind") == "group") {
      t.ensure_group_path(path);
      continue;
    }
    auto dt = dtype_from_name(n.at("dtype").get<std::string>());
    if (!dt) throw Error("container: unknown dtype in manifest");
    auto extents = n.at("extents").get<std::vector<uint64_t>>();
    auto& d = t.create_dataset(path, *dt, extents);
    size_t off = n.at("offset").get<size_t>(), nb = n.at("bytes").get<size_t>();
    if (nb != d.data.size()) throw Error("container: payload size mismatch on " + path);
    if (base + off + nb > len) throw Error("container: truncated payload on " + path);
    std::memcpy(d.data.data(), bytes + base + off, nb);
  }
  return t;
}

inline DataTree deserialize_tree(const std::vector<std::byte>& bytes) {
  return deserialize_tree(bytes.data(), bytes.size());
}

}  // namespace situ
