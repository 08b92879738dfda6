#include <doctest.h>

#include "ccmr/ops.hpp"
#include "support.hpp"

using namespace ccmr;
using namespace ccmr::test;

namespace {

// Direct-loop convolution with the library's weight layout.
T conv_reference(const T& x, const T& w, const T& b, const ConvGeometry& g) {
  const int cin = x.channels(), cout = w.channels();
  const int oh = g.out_height(x.height()), ow = g.out_width(x.width());
  T out(cout, oh, ow);
  for (int co = 0; co < cout; ++co) {
    for (int y = 0; y < oh; ++y) {
      for (int xx = 0; xx < ow; ++xx) {
        double s = b.empty() ? 0.0 : b(co, 0, 0);
        for (int ky = 0; ky < g.kernel_h; ++ky) {
          for (int kx = 0; kx < g.kernel_w; ++kx) {
            const int iy = y * g.stride - g.pad_h + ky, ix = xx * g.stride - g.pad_w + kx;
            if (iy < 0 || ix < 0 || iy >= x.height() || ix >= x.width()) continue;
            for (int ci = 0; ci < cin; ++ci) s += w(co, 0, (ky * g.kernel_w + kx) * cin + ci) * x(ci, iy, ix);
          }
        }
        out(co, y, xx) = s;
      }
    }
  }
  return out;
}

}  // namespace

TEST_CASE("conv2d matches direct loops for several geometries") {
  Rng rng(1);
  for (const ConvGeometry g : {ConvGeometry::same(3, 3), ConvGeometry::same(1, 1), ConvGeometry::same(3, 3, 2),
                               ConvGeometry::same(1, 5), ConvGeometry::same(5, 1), ConvGeometry::same(7, 7)}) {
    const T x = randn(3, 9, 8, rng);
    const T w = randn(4, 1, g.kernel_h * g.kernel_w * 3, rng);
    const T b = randn(4, 1, 1, rng);
    const auto out = conv2d(V(x), V(w), V(b), g).value();
    const T expect = conv_reference(x, w, b, g);
    REQUIRE(out.same_shape(expect));
    CHECK(max_abs_diff(out.mat(), expect.mat()) < 1e-12);
  }
}

TEST_CASE("conv2d and depthwise gradients") {
  Rng rng(2);
  for (const ConvGeometry g : {ConvGeometry::same(3, 3), ConvGeometry::same(1, 1), ConvGeometry::same(3, 3, 2),
                               ConvGeometry::same(1, 5)}) {
    const V x = leaf(randn(3, 6, 5, rng)), w = leaf(randn(2, 1, g.kernel_h * g.kernel_w * 3, rng)),
            b = leaf(randn(2, 1, 1, rng));
    CHECK(check_gradients(project([&] { return conv2d(x, w, b, g); }), {x, w, b}).max_rel < 1e-6);
  }
  const V x = leaf(randn(3, 5, 6, rng)), w = leaf(randn(3, 1, 9, rng)), b = leaf(randn(3, 1, 1, rng));
  CHECK(check_gradients(project([&] { return depthwise_conv2d(x, w, b, 3); }), {x, w, b}).max_rel < 1e-6);
}

TEST_CASE("elementwise and normalisation gradients") {
  Rng rng(3);
  const V a = leaf(randn(4, 3, 3, rng)), b = leaf(randn(4, 3, 3, rng));
  const V gain = leaf(randn(4, 1, 1, rng)), shift = leaf(randn(4, 1, 1, rng));
  const auto check = [&](std::function<V()> f, std::vector<V> in) {
    CHECK(check_gradients(project(std::move(f)), std::move(in)).max_rel < 1e-6);
  };
  check([&] { return a + b; }, {a, b});
  check([&] { return a - b; }, {a, b});
  check([&] { return a * b; }, {a, b});
  check([&] { return scale(a, 0.7); }, {a});
  check([&] { return gelu(a); }, {a});
  check([&] { return sigmoid(a); }, {a});
  check([&] { return tanh(a); }, {a});
  check([&] { return one_minus(a); }, {a});
  check([&] { return scale_channels(a, gain); }, {a, gain});
  check([&] { return affine_channels(a, gain, shift); }, {a, gain, shift});
  check([&] { return layer_norm(a, gain, shift); }, {a, gain, shift});
  check([&] { return concat_channels<double>({a, b}); }, {a, b});
  check([&] { return slice_channels(a, 1, 2); }, {a});
  check([&] { return upsample_bilinear(a, 2, 2.0); }, {a});
  check([&] { return upsample_bilinear(a, 4); }, {a});
}

TEST_CASE("relu, detach and grad mode") {
  Rng rng(4);
  const V a = leaf(randn(2, 3, 3, rng));
  CHECK((relu(a).value().mat().array() >= 0).all());
  CHECK_FALSE(detach(a).requires_grad());
  {
    NoGradGuard guard;
    CHECK_FALSE((a + a).requires_grad());
  }
  CHECK((a + a).requires_grad());
}

TEST_CASE("layer norm normalises each pixel over channels") {
  Rng rng(5);
  const V x(randn(6, 4, 4, rng, 3.0));
  const V gain(T::constant(6, 1, 1, 1.0)), bias(T(6, 1, 1));
  const T y = layer_norm(x, gain, bias).value();
  for (int p = 0; p < y.pixels(); ++p) {
    CHECK(std::abs(y.mat().col(p).mean()) < 1e-12);
    CHECK(std::sqrt(y.mat().col(p).squaredNorm() / 6) == doctest::Approx(1.0).epsilon(1e-5));
  }
}

TEST_CASE("bilinear upsampling keeps constants and scales values") {
  const V c(T::constant(2, 3, 4, 1.5));
  const T up = upsample_bilinear(c, 2, 2.0).value();
  CHECK(up.height() == 6);
  CHECK(up.width() == 8);
  CHECK((up.mat().array() == 3.0).all());
}

TEST_CASE("shape errors") {
  Rng rng(6);
  const V a(randn(2, 3, 3, rng)), b(randn(3, 3, 3, rng));
  CHECK_THROWS_AS(a + b, ShapeError);
  CHECK_THROWS_AS(slice_channels(a, 1, 2), ShapeError);
}
