#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "corr_attn/dataset.hpp"
#include "oracle/brute_force.hpp"
#include "test_support.hpp"

using namespace corr_attn;
using testing_support::TempDir;

namespace {

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected an Error";
  return ErrorCode::BadRequest;
}

void write_raw(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes,
               const std::vector<std::string>& classes) {
  std::ofstream(path, std::ios::binary).write(reinterpret_cast<const char*>(bytes.data()),
                                              static_cast<std::streamsize>(bytes.size()));
  std::ofstream(manifest_path(path)) << nlohmann::json(classes).dump();
}

DatasetIndex small_index() {
  Rng rng(1);
  auto idx = testing_support::random_index(rng, 3, 2, 4, 3);
  return idx;
}

}  // namespace

TEST(Dataset, RoundTripPreservesOrderAndValues) {
  TempDir dir;
  const auto index = small_index();
  write_dataset(index, dir / "d.bin");
  const auto loaded = load_dataset(dir / "d.bin");
  ASSERT_EQ(loaded.size(), 3u);
  EXPECT_EQ(loaded.records()[0].id, "x0");
  EXPECT_EQ(loaded.records()[2].id, "x2");
  EXPECT_EQ(loaded, index);
}

TEST(Dataset, RoundTripProperty) {
  TempDir dir;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const std::size_t n = rng.below(30);
    const std::size_t classes = 1 + rng.below(5);
    auto idx = testing_support::random_index(rng, n, classes, 1 + rng.below(16), 1 + rng.below(8));
    // Sprinkle image refs, including non-ASCII UTF-8.
    std::vector<EmbeddingRecord> recs = idx.records();
    for (auto& r : recs) {
      if (rng.coin()) r.image_ref = "images/" + r.id + "_\xc3\xa9.jpg";
    }
    DatasetIndex with_refs(idx.classes(), recs, idx.global_dim(), idx.patch_dim());
    write_dataset(with_refs, dir / "p.bin");
    EXPECT_EQ(load_dataset(dir / "p.bin"), with_refs) << "seed " << seed;
  }
}

TEST(Dataset, EmptyIndexIsHeaderOnly) {
  TempDir dir;
  DatasetIndex empty({"a"}, {}, 4, 4);
  write_dataset(empty, dir / "e.bin");
  EXPECT_EQ(std::filesystem::file_size(dir / "e.bin"), kHeaderSize);
  const auto loaded = load_dataset(dir / "e.bin");
  EXPECT_TRUE(loaded.empty());
  EXPECT_EQ(loaded, empty);
}

TEST(Dataset, SingleRecordFileSize) {
  TempDir dir;
  Rng rng(9);
  auto idx = testing_support::random_index(rng, 1, 1, 5, 6);
  write_dataset(idx, dir / "one.bin");
  EXPECT_EQ(std::filesystem::file_size(dir / "one.bin"), 32 + (2 + 2 + 4 + 4 * 5 + 4 * 49 * 6 + 2));
  EXPECT_EQ(std::filesystem::file_size(dir / "one.bin"), kHeaderSize + record_size(idx[0], 5, 6));
}

TEST(Dataset, WritesAreByteIdentical) {
  TempDir dir;
  SynthParams p;
  p.n_records = 500;
  p.n_classes = 10;
  p.dim = 8;
  const auto idx = synth_dataset(p);
  write_dataset(idx, dir / "a.bin");
  write_dataset(idx, dir / "b.bin");
  EXPECT_EQ(detail::read_file(dir / "a.bin"), detail::read_file(dir / "b.bin"));
}

TEST(Dataset, ChecksumsMatchReferenceReader) {
  TempDir dir;
  SynthParams p;
  p.n_records = 200;
  p.n_classes = 10;
  p.dim = 16;
  p.seed = 7;
  write_dataset(synth_dataset(p), dir / "s.bin");
  const auto loaded = load_dataset(dir / "s.bin");
  const auto ref = oracle::read_checksums((dir / "s.bin").string());
  const auto got = oracle::index_checksums(loaded);
  EXPECT_EQ(ref.n_records, 200u);
  EXPECT_EQ(got.n_records, ref.n_records);
  EXPECT_EQ(got.id_hash, ref.id_hash);
  EXPECT_EQ(got.label_sum, ref.label_sum);
  EXPECT_EQ(got.global_sum, ref.global_sum);
  EXPECT_EQ(got.patch_sum, ref.patch_sum);
  EXPECT_EQ(got.ref_bytes, ref.ref_bytes);
}

TEST(Dataset, AllVectorsUnitAfterLoad) {
  TempDir dir;
  // Write unnormalized vectors directly; the loader must normalize them.
  Rng rng(5);
  auto idx = testing_support::random_index(rng, 4, 2, 3, 2);
  auto bytes = encode_dataset(idx);
  // Scale every float after the header by 3 (ids/labels untouched: walk records).
  detail::ByteWriter w;
  w.bytes(bytes.data(), kHeaderSize);
  for (const auto& r : idx.records()) {
    w.str16(r.id, "id");
    w.u32(r.label_id);
    for (float x : r.global_vec) w.f32(3.f * x);
    for (float x : r.patch_grid) w.f32(-7.f * x);
    w.str16(r.image_ref, "ref");
  }
  write_raw(dir / "u.bin", w.buffer(), idx.classes());
  const auto loaded = load_dataset(dir / "u.bin");
  for (const auto& r : loaded.records()) {
    EXPECT_LT(std::abs(l2_norm(r.global_vec) - 1.0), 1e-6);
    for (int c = 0; c < kCells; ++c) EXPECT_LT(std::abs(l2_norm(r.patch(c)) - 1.0), 1e-6);
  }
}

TEST(Dataset, ZeroPatchNamesRecord) {
  TempDir dir;
  Rng rng(3);
  auto idx = testing_support::random_index(rng, 4, 2, 3, 2);
  auto bytes = encode_dataset(idx);
  const std::size_t rec = record_size(idx[0], 3, 2);  // all ids have equal length here
  const std::size_t patch_off = kHeaderSize + 2 * rec + 2 + idx[2].id.size() + 4 + 4 * 3 + 4 * 2 * 10;
  std::fill(bytes.begin() + patch_off, bytes.begin() + patch_off + 8, 0);
  write_raw(dir / "z.bin", bytes, idx.classes());
  try {
    load_dataset(dir / "z.bin");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ZeroVector);
    EXPECT_NE(std::string(e.what()).find("record #2"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("patch 10"), std::string::npos) << e.what();
  }
}

TEST(Dataset, MalformedFilesRejected) {
  TempDir dir;
  const auto idx = small_index();
  const auto good = encode_dataset(idx);
  const auto path = dir / "m.bin";

  auto bad = good;
  bad[0] = 'X';
  write_raw(path, bad, idx.classes());
  EXPECT_EQ(code_of([&] { load_dataset(path); }), ErrorCode::MagicMismatch);

  bad = good;
  bad[8] = 2;
  write_raw(path, bad, idx.classes());
  EXPECT_EQ(code_of([&] { load_dataset(path); }), ErrorCode::VersionUnsupported);

  bad = good;
  bad[28] = 8;  // G
  write_raw(path, bad, idx.classes());
  EXPECT_EQ(code_of([&] { load_dataset(path); }), ErrorCode::DimensionMismatch);

  bad.assign(good.begin(), good.end() - 5);
  write_raw(path, bad, idx.classes());
  EXPECT_EQ(code_of([&] { load_dataset(path); }), ErrorCode::TruncatedFile);

  bad = good;
  bad.push_back(0);
  write_raw(path, bad, idx.classes());
  EXPECT_EQ(code_of([&] { load_dataset(path); }), ErrorCode::TruncatedFile);

  write_raw(path, good, {"only-one"});
  EXPECT_EQ(code_of([&] { load_dataset(path); }), ErrorCode::DimensionMismatch);

  write_raw(path, good, idx.classes());
  std::filesystem::remove(manifest_path(path));
  EXPECT_EQ(code_of([&] { load_dataset(path); }), ErrorCode::IoFailure);
}

TEST(Dataset, DuplicateIdAndBadLabelRejected) {
  Rng rng(2);
  auto idx = testing_support::random_index(rng, 3, 2, 3, 2);
  auto recs = idx.records();
  recs[2].id = recs[0].id;
  EXPECT_EQ(code_of([&] { DatasetIndex(idx.classes(), recs, 3, 2); }), ErrorCode::DuplicateId);

  recs = idx.records();
  recs[1].label_id = 2;
  EXPECT_EQ(code_of([&] { DatasetIndex(idx.classes(), recs, 3, 2); }), ErrorCode::InvalidLabel);

  TempDir dir;
  recs = idx.records();
  recs[1].id = recs[0].id;
  detail::ByteWriter w;
  auto header = encode_dataset(idx);
  w.bytes(header.data(), kHeaderSize);
  for (const auto& r : recs) {
    w.str16(r.id, "id");
    w.u32(r.label_id);
    for (float x : r.global_vec) w.f32(x);
    for (float x : r.patch_grid) w.f32(x);
    w.str16(r.image_ref, "ref");
  }
  write_raw(dir / "dup.bin", w.buffer(), idx.classes());
  EXPECT_EQ(code_of([&] { load_dataset(dir / "dup.bin"); }), ErrorCode::DuplicateId);
}

TEST(Dataset, MissingGlobalVectorsArePooled) {
  TempDir dir;
  Rng rng(8);
  auto idx = testing_support::random_index(rng, 3, 1, 4, 4);
  detail::ByteWriter w;
  w.bytes(kMagic.data(), 8);
  w.u32(1);
  w.u32(3);
  w.u32(1);
  w.u32(0);  // D_g omitted
  w.u32(4);
  w.u32(7);
  for (const auto& r : idx.records()) {
    w.str16(r.id, "id");
    w.u32(r.label_id);
    for (float x : r.patch_grid) w.f32(x);
    w.str16("", "ref");
  }
  write_raw(dir / "g.bin", w.buffer(), idx.classes());
  const auto loaded = load_dataset(dir / "g.bin");
  EXPECT_EQ(loaded.global_dim(), 4u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(loaded[i].global_vec, mean_pool_patches(idx[i].patch_grid, 4));
  }
}

TEST(Synth, NoiselessClassesAreIdentical) {
  SynthParams p;
  p.n_records = 40;
  p.n_classes = 4;
  p.spread = 0.0;
  const auto idx = synth_dataset(p);
  for (const auto& r : idx.records()) {
    EXPECT_EQ(r.patch_grid, idx[r.label_id].patch_grid);
    EXPECT_EQ(r.global_vec, idx[r.label_id].global_vec);
  }
}

TEST(Synth, DeterministicInSeed) {
  SynthParams p;
  p.n_records = 60;
  const auto a = encode_dataset(synth_dataset(p));
  const auto b = encode_dataset(synth_dataset(p));
  EXPECT_EQ(a, b);
  p.seed = 8;
  EXPECT_NE(a, encode_dataset(synth_dataset(p)));
}

TEST(Synth, LeaveOneOutNearestNeighborIsPerfect) {
  SynthParams p;
  p.n_records = 200;
  p.n_classes = 10;
  p.spread = 0.1;
  p.seed = 7;
  const auto idx = synth_dataset(p);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    double best = -2.0;
    std::size_t arg = 0;
    for (std::size_t j = 0; j < idx.size(); ++j) {
      if (j == i) continue;
      const double s = oracle::sim(idx[i].global_vec.data(), idx[j].global_vec.data(), idx.global_dim());
      if (s > best) {
        best = s;
        arg = j;
      }
    }
    correct += idx[arg].label_id == idx[i].label_id;
  }
  EXPECT_EQ(correct, idx.size());
}

TEST(Synth, InvalidParams) {
  SynthParams p;
  p.n_records = 3;
  p.n_classes = 4;
  EXPECT_EQ(code_of([&] { synth_dataset(p); }), ErrorCode::InvalidParam);
  p = {};
  p.dim = 1;
  EXPECT_EQ(code_of([&] { synth_dataset(p); }), ErrorCode::InvalidParam);
  p = {};
  p.n_classes = 0;
  EXPECT_EQ(code_of([&] { synth_dataset(p); }), ErrorCode::InvalidParam);
}
