#include <catch2/catch_amalgamated.hpp>

#include <numeric>
#include <random>

#include <fmt/format.h>

#include <situ/datamodel.hpp>

using namespace situ;

namespace {
std::vector<std::string> dset_paths(const DataTree& t) {
  std::vector<std::string> out;
  for (const auto& e : t.list())
    if (!e.is_group) out.push_back(e.path);
  return out;
}
}  // namespace

TEST_CASE("decompose splits the leading dimension into balanced ordered parts") {
  // closed form: part k owns ceil or floor of extent/parts, larger parts first
  for (uint64_t extent = 0; extent <= 64; ++extent) {
    for (int parts = 1; parts <= 8; ++parts) {
      auto sels = decompose({extent, 3}, parts);
      REQUIRE(sels.size() == (size_t)parts);
      uint64_t at = 0;
      for (int k = 0; k < parts; ++k) {
        const uint64_t want =
            extent / parts + (k < (int)(extent % parts) ? 1 : 0);  // independent formula
        CHECK(sels[k].offset[0] == at);
        CHECK(sels[k].count[0] == want);
        CHECK(sels[k].count[1] == 3);  // trailing dims never split
        CHECK(sels[k].offset[1] == 0);
        at += want;
      }
      CHECK(at == extent);
    }
  }
}

TEST_CASE("decompose of 10 elements over 3 parts") {
  auto sels = decompose({10}, 3);
  CHECK(sels[0] == Selection{{0}, {4}});
  CHECK(sels[1] == Selection{{4}, {3}});
  CHECK(sels[2] == Selection{{7}, {3}});
}

TEST_CASE("selection intersection") {
  Selection a{{2, 0}, {6, 3}}, b{{5, 0}, {10, 3}};
  auto i = intersect(a, b);
  CHECK(i.offset == std::vector<uint64_t>{5, 0});
  CHECK(i.count == std::vector<uint64_t>{3, 3});
  CHECK(intersect(Selection{{0}, {2}}, Selection{{5}, {2}}).empty());
}

TEST_CASE("dataset write/read round-trip per dtype") {
  DataTree t;
  auto check = [&]<class T>(T base, const std::string& path) {
    t.create_dataset(path, dtype_of<T>::value, {7});
    std::vector<T> vals(7);
    for (int i = 0; i < 7; ++i) vals[i] = base + T(i);
    t.write_selection(path, Selection{{0}, {7}}, vals.data(), vals.size() * sizeof(T));
    auto bytes = t.read_selection(path, Selection{{0}, {7}});
    std::vector<T> back(7);
    std::memcpy(back.data(), bytes.data(), bytes.size());
    CHECK(back == vals);
  };
  check(uint8_t{3}, "/a/u8");
  check(int32_t{-5}, "/a/i32");
  check(int64_t{1} << 40, "/a/i64");
  check(uint64_t{1} << 60, "/a/u64");
  check(2.5f, "/a/f32");
  check(-0.125, "/a/f64");
}

TEST_CASE("2-D selection windows address the right rows") {
  DataTree t;
  t.create_dataset("/m", DType::I32, {4, 5});
  std::vector<int32_t> all(20);
  std::iota(all.begin(), all.end(), 0);
  t.write_selection("/m", Selection{{0, 0}, {4, 5}}, all.data(), all.size() * 4);

  auto bytes = t.read_selection("/m", Selection{{1, 2}, {2, 3}});
  std::vector<int32_t> got(6);
  std::memcpy(got.data(), bytes.data(), bytes.size());
  CHECK(got == std::vector<int32_t>{7, 8, 9, 12, 13, 14});

  std::vector<int32_t> patch{100, 101, 102};
  t.write_selection("/m", Selection{{3, 1}, {1, 3}}, patch.data(), patch.size() * 4);
  bytes = t.read_selection("/m", Selection{{3, 0}, {1, 5}});
  std::memcpy(got.data(), bytes.data(), 20);
  CHECK(std::vector<int32_t>(got.begin(), got.begin() + 5) ==
        std::vector<int32_t>{15, 100, 101, 102, 19});
}

TEST_CASE("tree errors") {
  DataTree t;
  t.create_dataset("/g/d", DType::F32, {4});
  CHECK_THROWS_AS(t.create_dataset("/g/d", DType::F32, {4}), Error);  // exists
  CHECK_THROWS_AS(t.dataset("/g/nope"), Error);
  std::vector<float> three(3);
  CHECK_THROWS_AS(
      t.write_selection("/g/d", Selection{{0}, {4}}, three.data(), three.size() * 4),
      Error);  // size mismatch
  CHECK_THROWS_AS(t.read_selection("/g/d", Selection{{2}, {4}}), Error);  // out of range
}

TEST_CASE("tree listing is deterministic and clear empties") {
  DataTree t;
  t.create_dataset("/b/y", DType::U8, {1});
  t.create_dataset("/a/x", DType::U8, {1});
  t.create_dataset("/a/w", DType::U8, {1});
  auto paths = dset_paths(t);
  REQUIRE(paths == std::vector<std::string>{"/b/y", "/a/x", "/a/w"});
  // creation order within the walk, groups walked in insertion order
  CHECK(dset_paths(t) == paths);  // stable
  CHECK_FALSE(t.empty());
  t.clear();
  CHECK(t.empty());
  CHECK(t.list().empty());
}

TEST_CASE("serialize/deserialize round-trips and is byte-stable") {
  DataTree t;
  t.create_dataset("/group1/grid", DType::U64, {6});
  std::vector<uint64_t> g{10, 11, 12, 13, 14, 15};
  t.write_selection("/group1/grid", Selection{{0}, {6}}, g.data(), g.size() * 8);
  t.create_dataset("/group1/particles", DType::F32, {4, 3});
  std::vector<float> p(12, 1.5f);
  t.write_selection("/group1/particles", Selection{{0, 0}, {4, 3}}, p.data(),
                    p.size() * 4);

  auto bytes = serialize_tree(t);
  REQUIRE(bytes.size() > 8);
  CHECK(std::memcmp(bytes.data(), "WLK1", 4) == 0);
  CHECK(serialize_tree(t) == bytes);  // deterministic

  DataTree back = deserialize_tree(bytes);
  CHECK(back == t);
  CHECK(back.read_selection("/group1/grid", Selection{{0}, {6}}) ==
        t.read_selection("/group1/grid", Selection{{0}, {6}}));
  CHECK(back.dataset("/group1/particles").dtype == DType::F32);
  CHECK(back.dataset("/group1/particles").extents == std::vector<uint64_t>{4, 3});

  // serialization of the deserialized tree is identical: no drift
  CHECK(serialize_tree(back) == bytes);
}

TEST_CASE("random trees survive the serialize round-trip") {
  std::mt19937 rng(7);
  for (int iter = 0; iter < 25; ++iter) {
    DataTree t;
    const int nds = 1 + (int)(rng() % 6);
    for (int d = 0; d < nds; ++d) {
      const auto dt = DType(rng() % 6);
      std::vector<uint64_t> ext{1 + rng() % 9};
      if (rng() % 2) ext.push_back(1 + rng() % 4);
      const std::string path = fmt::format("/g{}/d{}", rng() % 3, d);
      t.create_dataset(path, dt, ext);
      Selection full{std::vector<uint64_t>(ext.size(), 0), ext};
      std::vector<std::byte> raw(full.elements() * dtype_size(dt));
      for (auto& b : raw) b = std::byte(rng() & 0xff);
      t.write_selection(path, full, raw.data(), raw.size());
    }
    auto bytes = serialize_tree(t);
    DataTree back = deserialize_tree(bytes);
    REQUIRE(back == t);
    for (const auto& path : dset_paths(t)) {
      const auto& d = t.dataset(path);
      Selection full{std::vector<uint64_t>(d.extents.size(), 0), d.extents};
      CHECK(back.read_selection(path, full) == t.read_selection(path, full));
    }
  }
}
