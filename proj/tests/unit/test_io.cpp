#include <doctest.h>

#include <cmath>
#include <cstring>
#include <limits>

#include "finemine/error.hpp"
#include "finemine/image.hpp"
#include "finemine/parallel.hpp"
#include "finemine/tensor_io.hpp"
#include "helpers.hpp"

using namespace finemine;

TEST_CASE("FMT1 layout is magic, rank, LE dims, LE floats") {
  Tensor t{{2, 1}, {1.0f, -2.5f}};
  const auto bytes = encode_fmt1(t);
  REQUIRE(bytes.size() == 4 + 1 + 2 * 4 + 2 * 4);
  CHECK(bytes.substr(0, 4) == "FMT1");
  CHECK(static_cast<unsigned char>(bytes[4]) == 2);
  CHECK(static_cast<unsigned char>(bytes[5]) == 2);
  CHECK(static_cast<unsigned char>(bytes[6]) == 0);
  CHECK(static_cast<unsigned char>(bytes[9]) == 1);
  // 1.0f = 0x3f800000 little-endian
  CHECK(static_cast<unsigned char>(bytes[13]) == 0x00);
  CHECK(static_cast<unsigned char>(bytes[16]) == 0x3f);
}

TEST_CASE("FMT1 round-trips random tensors bit-exactly") {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor t;
    const int rank = static_cast<int>(rng.uniform_int(0, 4));
    std::size_t n = 1;
    for (int r = 0; r < rank; ++r) {
      t.dims.push_back(static_cast<std::uint32_t>(rng.uniform_int(0, 5)));
      n *= t.dims.back();
    }
    for (std::size_t i = 0; i < n; ++i) {
      std::uint32_t bits = static_cast<std::uint32_t>(rng.engine()());
      float f;
      std::memcpy(&f, &bits, 4);
      if (std::isnan(f)) f = 0.5f;
      t.data.push_back(f);
    }
    CHECK(decode_fmt1(encode_fmt1(t), "mem") == t);
  }
}

TEST_CASE("FMT1 rejects bad magic and truncation") {
  const auto good = encode_fmt1({{3}, {1, 2, 3}});
  CHECK_THROWS_AS(decode_fmt1("XMT1" + good.substr(4), "x"), IntegrityError);
  CHECK_THROWS_AS(decode_fmt1(good.substr(0, good.size() - 1), "x"), IntegrityError);
  CHECK_THROWS_AS(decode_fmt1(good + "extra", "x"), IntegrityError);
  CHECK_THROWS_WITH_AS(read_fmt1("/nonexistent/t.fmt1"), doctest::Contains("/nonexistent/t.fmt1"), IoError);
}

TEST_CASE("FMT1 file round-trip") {
  testutil::TempDir dir("fmt1");
  const Tensor t{{2, 3}, {0, 1, 2, 3, 4, 5}};
  write_fmt1(dir.path() / "t.fmt1", t);
  CHECK(read_fmt1(dir.path() / "t.fmt1") == t);
}

TEST_CASE("image tensor round-trip") {
  const auto img = testutil::random_image(9, 11, 1);
  CHECK(image_from_tensor(image_to_tensor(img), "mem") == img);
}

TEST_CASE("resize_bilinear") {
  const auto img = testutil::random_image(10, 12, 2);
  CHECK(resize_bilinear(img, 10, 12) == img);

  Image flat(7, 5, 3, 0.25f);
  const auto up = resize_bilinear(flat, 13, 9);
  for (float p : up.pixels) CHECK(p == doctest::Approx(0.25));

  // Half-pixel centres: a 2-pixel ramp upsampled to 4 gives 0, 0.25, 0.75, 1.
  Image ramp(1, 2, 1);
  ramp.at(0, 0, 0) = 0.0f;
  ramp.at(0, 1, 0) = 1.0f;
  const auto r = resize_bilinear(ramp, 1, 4);
  CHECK(r.at(0, 0, 0) == doctest::Approx(0.0));
  CHECK(r.at(0, 1, 0) == doctest::Approx(0.25));
  CHECK(r.at(0, 2, 0) == doctest::Approx(0.75));
  CHECK(r.at(0, 3, 0) == doctest::Approx(1.0));
}

TEST_CASE("crop, centre crop, flip") {
  const auto img = testutil::random_image(8, 10, 3);
  const auto c = crop(img, 2, 3, 4, 5);
  CHECK(c.height == 4);
  CHECK(c.width == 5);
  CHECK(c.at(1, 2, 1) == img.at(3, 5, 1));
  const auto cc = center_crop(img, 6);
  CHECK(cc.at(0, 0, 0) == img.at(1, 2, 0));
  const auto f = flip_horizontal(img);
  CHECK(f.at(4, 0, 2) == img.at(4, 9, 2));
  CHECK(flip_horizontal(f) == img);
  CHECK_THROWS_AS(crop(img, 5, 0, 4, 4), ValidationError);
}

TEST_CASE("resize_shorter_side keeps aspect ratio") {
  const auto img = testutil::random_image(10, 20, 4);
  const auto r = resize_shorter_side(img, 5);
  CHECK(r.height == 5);
  CHECK(r.width == 10);
}

TEST_CASE("validate_image") {
  Image ok(8, 8);
  CHECK_NOTHROW(validate_image(ok));
  Image small(7, 8);
  CHECK_THROWS_AS(validate_image(small), ValidationError);
  Image bad(8, 8);
  bad.pixels[3] = 1.5f;
  CHECK_THROWS_AS(validate_image(bad), ValidationError);
  bad.pixels[3] = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(validate_image(bad), ValidationError);
}

TEST_CASE("parallel_for fills every slot regardless of thread count") {
  for (unsigned threads : {1u, 2u, 3u, 8u}) {
    set_num_threads(threads);
    std::vector<int> out(101, -1);
    parallel_for(out.size(), [&](std::size_t i) { out[i] = static_cast<int>(i * i); });
    for (std::size_t i = 0; i < out.size(); ++i) CHECK(out[i] == static_cast<int>(i * i));
  }
  set_num_threads(2);
  CHECK_THROWS_AS(parallel_for(10, [](std::size_t i) {
                    if (i == 7) throw ValidationError("boom");
                  }),
                  ValidationError);
  set_num_threads(0);
}

TEST_CASE("mix_seed gives distinct streams") {
  CHECK(mix_seed(1, 0) != mix_seed(1, 1));
  CHECK(mix_seed(1, 0) != mix_seed(2, 0));
  CHECK(mix_seed(5, 9) == mix_seed(5, 9));
}
