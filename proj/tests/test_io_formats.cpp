#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "dcmq/io_formats.hpp"
#include "dcmq/synth.hpp"

namespace dcmq {
namespace {

std::string hex(const Bytes& b) {
  std::string out;
  char buf[3];
  for (std::uint8_t v : b) {
    std::snprintf(buf, sizeof buf, "%02x", v);
    out += buf;
  }
  return out;
}

Matrix float_matrix(Eigen::Index rows, Eigen::Index cols, SeededRng& rng) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(rng.normal());
  return m;
}

TrainedModel small_model() {
  TrainConfig c;
  c.books = 2;
  c.codewords = 4;
  c.dim = 8;
  c.image_hidden = {5};
  c.text_hidden = {};
  c.lambda = 0.25;
  SeededRng rng(9);
  TrainedModel m{init_student(c, 6, 3, rng), c, {{0, 0, 1.5}, {0, 1, 1.25}, {1, 0, 0.1}}};
  round_to_storage(m.student);
  return m;
}

Index small_index(bool labels) {
  SeededRng rng(10);
  const Codebooks cb(2, 16, float_matrix(32, 3, rng));
  std::optional<MultiHotLabels> l;
  if (labels) l = MultiHotLabels::from_rows({{1, 0, 0, 0, 0, 0, 0, 0, 1}, {0, 1, 1, 0, 0, 0, 0, 0, 0}, {0, 0, 0, 0, 0, 0, 0, 0, 0}});
  return build_index(float_matrix(3, 6, rng), cb, l);
}

TEST(Embeddings, GoldenBytes) {
  Matrix m(1, 2);
  m << 1.0, -2.0;
  EXPECT_EQ(hex(encode_embeddings(m)), "44434d51454d4231" "01000000" "02000000" "0000803f" "000000c0");
}

TEST(Embeddings, RoundTripBitwise) {
  SeededRng rng(1);
  const Matrix m = float_matrix(8, 16, rng);
  const Bytes b = encode_embeddings(m);
  EXPECT_EQ(b.size(), 16u + 4u * 128u);
  EXPECT_EQ(decode_embeddings(b), m);
  EXPECT_EQ(encode_embeddings(decode_embeddings(b)), b);
  EXPECT_EQ(decode_embeddings(encode_embeddings(Matrix(0, 5))).cols(), 5);
}

TEST(Embeddings, Errors) {
  SeededRng rng(2);
  Bytes b = encode_embeddings(float_matrix(2, 3, rng));
  Bytes bad = b;
  std::fill(bad.begin(), bad.begin() + 8, 'X');
  EXPECT_THROW(decode_embeddings(bad), UnsupportedFormatError);

  Bytes cut(b.begin(), b.end() - 5);
  try {
    decode_embeddings(cut);
    FAIL() << "expected CorruptFileError";
  } catch (const CorruptFileError& e) {
    EXPECT_EQ(e.offset(), 16u);
    EXPECT_NE(std::string(e.what()).find("header implies 24 bytes, file has 19"), std::string::npos) << e.what();
  }
  Bytes extra = b;
  extra.push_back(0);
  EXPECT_THROW(decode_embeddings(extra), CorruptFileError);
  EXPECT_THROW(decode_embeddings(Bytes(b.begin(), b.begin() + 12)), CorruptFileError);

  Bytes nan = b;
  nan[16] = 0x00; nan[17] = 0x00; nan[18] = 0xc0; nan[19] = 0x7f;
  EXPECT_THROW(decode_embeddings(nan), CorruptFileError);
}

TEST(Labels, GoldenBytesAndPadding) {
  const auto l = MultiHotLabels::from_rows({{1, 0, 1, 0, 0, 0, 0, 0, 0, 1}});
  const Bytes b = encode_labels(l);
  EXPECT_EQ(hex(b), "44434d514c424c31" "01000000" "0a000000" "0502");
  EXPECT_EQ(decode_labels(b), l);
  Bytes pad = b;
  pad.back() |= 0x80;
  EXPECT_THROW(decode_labels(pad), CorruptFileError);
}

TEST(Codebooks, RoundTripAndGolden) {
  Matrix w(2, 1);
  w << 0.5, -1.0;
  const Codebooks cb(1, 2, w);
  const Bytes b = encode_codebooks(cb);
  EXPECT_EQ(hex(b), "44434d5143424b31" "01" "01000000" "02000000" "01000000" "0000003f" "000080bf");
  EXPECT_EQ(decode_codebooks(b), cb);
  Bytes v2 = b;
  v2[8] = 2;
  EXPECT_THROW(decode_codebooks(v2), UnsupportedFormatError);
  Bytes k3 = b;
  k3[13] = 3;
  EXPECT_THROW(decode_codebooks(k3), CorruptFileError);
}

TEST(Model, RoundTrip) {
  const TrainedModel m = small_model();
  const Bytes b = encode_model(m);
  const TrainedModel back = decode_model(b);
  EXPECT_EQ(back, m);
  EXPECT_EQ(encode_model(back), b);
}

TEST(Model, RejectsUnknownSetting) {
  Bytes b = encode_model(small_model());
  // First settings line starts at byte 13 with "books=".
  ASSERT_EQ(std::string(b.begin() + 13, b.begin() + 19), "books=");
  b[13] = 'x';
  EXPECT_THROW(decode_model(b), CorruptFileError);
}

TEST(Index, RoundTripWithAndWithoutLabels) {
  for (bool labels : {false, true}) {
    const Index idx = small_index(labels);
    const Bytes b = encode_index(idx);
    EXPECT_EQ(decode_index(b), idx);
    EXPECT_EQ(encode_index(decode_index(b)), b);
  }
}

TEST(Index, HeaderLayout) {
  const Bytes b = encode_index(small_index(false));
  EXPECT_EQ(hex(Bytes(b.begin(), b.begin() + 22)), "44434d5149445831" "01" "03000000" "02000000" "10000000" "00");
  // Codes follow the codebook payload: 22 + 4 + 32*3*4 = 410; one byte per code.
  EXPECT_EQ(b.size(), 410u + 3u);
}

TEST(Codecs, TotalOverRandomCorruption) {
  // Every mutated or truncated stream decodes or throws a FormatError.
  const std::vector<Bytes> seeds = {
      encode_embeddings(Matrix::Ones(3, 2)), encode_labels(MultiHotLabels::from_rows({{1, 0}, {0, 1}})),
      encode_codebooks(small_index(false).codebooks()), encode_model(small_model()),
      encode_index(small_index(true))};
  SeededRng rng(77);
  int decoded = 0, rejected = 0;
  for (const Bytes& base : seeds) {
    for (int t = 0; t < 400; ++t) {
      Bytes b = base;
      const int mode = static_cast<int>(rng.below(3));
      if (mode == 0) {
        b.resize(rng.below(b.size() + 1));
      } else {
        const int flips = 1 + static_cast<int>(rng.below(4));
        for (int f = 0; f < flips; ++f) b[rng.below(b.size())] ^= static_cast<std::uint8_t>(1 + rng.below(255));
      }
      try {
        switch (&base - seeds.data()) {
          case 0: decode_embeddings(b); break;
          case 1: decode_labels(b); break;
          case 2: decode_codebooks(b); break;
          case 3: decode_model(b); break;
          default: decode_index(b); break;
        }
        ++decoded;
      } catch (const FormatError&) {
        ++rejected;
      }
    }
  }
  EXPECT_GT(rejected, 0);
  EXPECT_EQ(decoded + rejected, 2000);
}

TEST(Files, MissingFileIsIoError) {
  EXPECT_THROW(read_embeddings("/nonexistent/dir/x.emb"), IoError);
}

class SynthFiles : public ::testing::Test {
 protected:
  std::filesystem::path dir_ = std::filesystem::temp_directory_path() /
                               ("dcmq_synth_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()));
  void TearDown() override { std::filesystem::remove_all(dir_); }
};

SynthConfig small_synth() {
  SynthConfig c;
  c.n_train = 40;
  c.n_gallery = 20;
  c.n_query = 10;
  c.image_dim = 16;
  c.text_dim = 12;
  c.teacher_dim = 32;
  return c;
}

TEST_F(SynthFiles, SameSeedGivesIdenticalBytes) {
  const SynthConfig c = small_synth();
  const auto first = write_synth_dataset(synth_dataset(c), dir_ / "a");
  const auto second = write_synth_dataset(synth_dataset(c), dir_ / "b");
  ASSERT_EQ(first.size(), 15u);
  for (std::size_t i = 0; i < first.size(); ++i) EXPECT_EQ(read_file(first[i]), read_file(second[i]));
  const SynthSplit back = read_synth_split(dir_ / "a", "gallery");
  const SynthDataset ds = synth_dataset(c);
  EXPECT_EQ(back.image, ds.gallery.image);
  EXPECT_EQ(back.labels, ds.gallery.labels);
}

TEST(Synth, NoiselessSingleLabelEqualsPrototypes) {
  SynthConfig c = small_synth();
  c.noise = 0.0;
  c.labels_max = 1;
  const SynthDataset ds = synth_dataset(c);
  const Matrix t = cosine_sim_matrix(ds.train.teacher_image, ds.train.teacher_text);
  for (std::size_t i = 0; i < 40; ++i) {
    for (std::size_t j = 0; j < 40; ++j) {
      if (ds.train.labels.shares(i, ds.train.labels, j)) {
        EXPECT_NEAR(t(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)), 1.0, 1e-6);
        EXPECT_TRUE(ds.train.image.row(static_cast<Eigen::Index>(i))
                        .isApprox(ds.train.image.row(static_cast<Eigen::Index>(j)), 1e-6));
      }
    }
  }
}

TEST(Synth, SameClassMarginAtLowNoise) {
  SynthConfig c;
  c.noise = 0.1;
  c.labels_max = 1;
  c.n_train = 400;
  c.n_gallery = 2;
  c.n_query = 2;
  const SynthDataset ds = synth_dataset(c);
  const Matrix t = cosine_sim_matrix(ds.train.teacher_image, ds.train.teacher_text);
  double same = 0, cross = 0;
  int ns = 0, nc = 0;
  for (Eigen::Index i = 0; i < t.rows(); ++i) {
    for (Eigen::Index j = 0; j < t.cols(); ++j) {
      if (ds.train.labels.shares(static_cast<std::size_t>(i), ds.train.labels, static_cast<std::size_t>(j))) {
        same += t(i, j);
        ++ns;
      } else {
        cross += t(i, j);
        ++nc;
      }
    }
  }
  EXPECT_GT(same / ns - cross / nc, 0.3);
}

TEST(Synth, LabelCountsAndRangeCompression) {
  SynthConfig c = small_synth();
  c.labels_min = 2;
  c.labels_max = 3;
  const SynthDataset ds = synth_dataset(c);
  for (std::size_t r = 0; r < ds.train.labels.rows(); ++r) {
    int n = 0;
    for (std::size_t k = 0; k < 8; ++k) n += ds.train.labels.test(r, k);
    EXPECT_GE(n, 2);
    EXPECT_LE(n, 3);
  }
  c.range_compress = true;
  c.teacher_dim = 512;
  c.labels_min = c.labels_max = 1;
  const SynthDataset rc = synth_dataset(c);
  const Matrix t = cosine_sim_matrix(rc.train.teacher_image, rc.train.teacher_text);
  for (Eigen::Index i = 0; i < t.rows(); ++i) {
    for (Eigen::Index j = 0; j < t.cols(); ++j) {
      if (i == j) continue;
      EXPECT_GT(t(i, j), -0.05);
      EXPECT_LT(t(i, j), 0.30);
    }
  }
}

TEST(Synth, RejectsImpossibleConfigs) {
  SynthConfig c;
  c.labels_max = 9;
  EXPECT_THROW(synth_dataset(c), ParameterError);
  c = {};
  c.n_train = 1;
  EXPECT_THROW(synth_dataset(c), ParameterError);
  c = {};
  c.noise = -1;
  EXPECT_THROW(synth_dataset(c), ParameterError);
}

}  // namespace
}  // namespace dcmq
