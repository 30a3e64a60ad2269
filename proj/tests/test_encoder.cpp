#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "mmdial/encoder.hpp"
#include "mmdial/gradcheck.hpp"
#include "oracle.hpp"

using namespace mmdial;

namespace {

ModelConfig tiny(std::size_t layers = 2) {
  ModelConfig c = gradcheck_config();
  c.n_layers = layers;
  c.context_size = 3;
  return c;
}

std::vector<std::vector<double>> features(std::size_t n, std::size_t d, std::uint64_t seed) {
  std::mt19937_64 g(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<std::vector<double>> out(n, std::vector<double>(d));
  for (auto& v : out)
    for (double& x : v) x = nd(g);
  return out;
}

void fill(Tensor t, double v) { std::fill(t.data().begin(), t.data().end(), v); }

bool same(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

}  // namespace

TEST_SUITE("encoder") {

TEST_CASE("embed_utterance shapes") {
  Model model(tiny(), 1);
  EmbeddedUtterance e = embed_utterance({Speaker::user, {5, 6, 7}, {}}, model);
  CHECK(e.text.shape() == Shape{3, 8});
  CHECK(e.images.shape() == Shape{0, 8});
}

TEST_CASE("embedding rows differ across positions only by the positional delta") {
  Model model(tiny(), 2);
  EmbeddedUtterance a = embed_utterance({Speaker::user, {6, 9, 10}, {}}, model);
  EmbeddedUtterance b = embed_utterance({Speaker::user, {9, 6, 10}, {}}, model);
  Tensor pe = positional_encoding(3, 8);
  for (std::size_t c = 0; c < 8; ++c) {
    CHECK(std::abs((b.text.at(1, c) - a.text.at(0, c)) - (pe.at(1, c) - pe.at(0, c))) < 1e-12);
    CHECK(std::abs(a.text.at(2, c) - b.text.at(2, c)) < 1e-15);
    CHECK(std::abs(a.text.at(0, c) - (model.embedding().at(6, c) * std::sqrt(8.0) + pe.at(0, c))) < 1e-12);
  }
}

TEST_CASE("image rows are the projected features") {
  Model model(tiny(), 3);
  const auto f = features(2, 5, 4);
  EmbeddedUtterance e = embed_utterance({Speaker::user, {kImgCtx}, f}, model);
  const auto expect = oracle::matmul(f, oracle::to_mat(model.image_projection()));
  CHECK(oracle::max_abs_diff(expect, e.images) < 1e-12);
}

TEST_CASE("embed_utterance errors") {
  Model model(tiny(), 3);
  CHECK_THROWS_AS(embed_utterance({Speaker::user, {12}, {}}, model), DataError);
  CHECK_THROWS_AS(embed_utterance({Speaker::user, {5}, features(3, 5, 1)}, model), DataError);
  CHECK_THROWS_AS(embed_utterance({Speaker::user, {5}, features(1, 4, 1)}, model), DataError);
  CHECK_THROWS_AS(embed_utterance({Speaker::user, {}, {}}, model), ContractError);
}

TEST_CASE("text stream with zero output projection is bias plus residual") {
  Model model(tiny(), 5);
  const EncoderLayerParams& layer = model.encoder_layers()[0];
  fill(layer.text_attn.w_o, 0.0);
  Tensor bias = layer.text_norm.bias;
  for (std::size_t c = 0; c < 8; ++c) bias.data()[c] = 0.1 * static_cast<double>(c);
  std::mt19937_64 g(6);
  Tensor t = oracle::random_matrix(4, 8, g);
  Tensor out = text_stream_layer(t, {}, layer);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 8; ++c) CHECK(out.at(r, c) == doctest::Approx(bias.data()[c] + t.at(r, c)).epsilon(1e-14));
}

TEST_CASE("text stream on a single word matches the scalar oracle") {
  Model model(tiny(), 7);
  const EncoderLayerParams& layer = model.encoder_layers()[1];
  std::mt19937_64 g(8);
  Tensor t = oracle::random_matrix(1, 8, g);
  const auto tv = oracle::to_mat(t);
  const auto attn = oracle::matmul(oracle::matmul(tv, oracle::to_mat(layer.text_attn.w_v)), oracle::to_mat(layer.text_attn.w_o));
  const auto expect = oracle::add(oracle::layer_norm(attn, layer.text_norm), tv);
  CHECK(oracle::max_abs_diff(expect, text_stream_layer(t, {1}, layer)) < 1e-10);
}

TEST_CASE("image stream matches the brute-force oracle") {
  Model model(tiny(), 9);
  const EncoderLayerParams& layer = model.encoder_layers()[0];
  std::mt19937_64 g(10);
  for (std::size_t k : {1u, 2u}) {
    Tensor t = oracle::random_matrix(3, 8, g), img = oracle::random_matrix(k, 8, g);
    const auto tv = oracle::to_mat(t);
    const auto attn = oracle::attention(tv, oracle::to_mat(img), oracle::to_mat(img), layer.image_attn);
    const auto expect = oracle::add(oracle::layer_norm(attn, layer.image_norm), tv);
    Tensor out = image_stream_layer(t, img, nullptr, layer);
    CHECK(out.shape() == Shape{3, 8});
    CHECK(oracle::max_abs_diff(expect, out) < 1e-10);
  }
}

TEST_CASE("history update matches the step-by-step oracle") {
  Model model(tiny(), 11);
  const EncoderLayerParams& layer = model.encoder_layers()[1];
  std::normal_distribution<double> nd(0.0, 0.3);
  std::mt19937_64 g(12);
  for (Tensor b : {layer.history_ffn.b1, layer.history_ffn.b2})
    for (double& v : b.data()) v = nd(g);
  for (std::size_t h : {1u, 4u}) {
    Tensor m = oracle::random_matrix(3, 8, g), hist = oracle::random_matrix(h, 8, g);
    const auto mv = oracle::to_mat(m);
    const auto tilde = oracle::attention(mv, oracle::to_mat(hist), oracle::to_mat(hist), layer.history_attn);
    const auto hat = oracle::add(oracle::layer_norm(tilde, layer.history_norm), mv);
    const auto expect = oracle::add(oracle::layer_norm(oracle::ffn(hat, layer.history_ffn), layer.history_ffn_norm), hat);
    Tensor out = history_update(m, hist, std::vector<std::uint8_t>(h, 1), layer);
    CHECK(out.shape() == Shape{3, 8});
    CHECK(oracle::max_abs_diff(expect, out) < 1e-10);
  }
}

TEST_CASE("history update with a zero FFN adds the norm bias") {
  Model model(tiny(), 13);
  const EncoderLayerParams& layer = model.encoder_layers()[0];
  fill(layer.history_ffn.w1, 0.0);
  fill(layer.history_ffn.w2, 0.0);
  fill(layer.history_ffn.b2, 0.0);
  Tensor bias = layer.history_ffn_norm.bias;
  fill(bias, 0.25);
  std::mt19937_64 g(14);
  Tensor m = oracle::random_matrix(2, 8, g), hist = oracle::random_matrix(3, 8, g);
  const auto mv = oracle::to_mat(m);
  const auto tilde = oracle::attention(mv, oracle::to_mat(hist), oracle::to_mat(hist), layer.history_attn);
  const auto hat = oracle::add(oracle::layer_norm(tilde, layer.history_norm), mv);
  Tensor out = history_update(m, hist, {}, layer);
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t c = 0; c < 8; ++c) CHECK(std::abs(out.at(r, c) - (0.25 + hat[r][c])) < 1e-10);
}

TEST_CASE("modality dropout branches") {
  std::mt19937_64 g(15);
  Tensor t = oracle::random_matrix(3, 4, g), i = oracle::random_matrix(3, 4, g);
  FusionBranch b;
  CHECK(same(modality_dropout_fuse(t, i, 0.4, 0.1, true, &b), t));
  CHECK(b == FusionBranch::text);
  CHECK(same(modality_dropout_fuse(t, i, 0.4, 0.95, true, &b), i));
  CHECK(b == FusionBranch::image);
  Tensor m = modality_dropout_fuse(t, i, 0.0, 0.1, true, &b);
  CHECK(b == FusionBranch::mean);
  for (std::size_t k = 0; k < 12; ++k) CHECK(m.data()[k] == (t.data()[k] + i.data()[k]) / 2.0);
  // Inference ignores p_net.
  for (double u : {0.0, 0.1, 0.5, 0.95, 1.0}) {
    modality_dropout_fuse(t, i, 1.0, u, false, &b);
    CHECK(b == FusionBranch::mean);
  }
  CHECK_THROWS_AS(modality_dropout_fuse(t, i, 1.5, 0.5, true), ConfigError);
  CHECK_THROWS_AS(modality_dropout_fuse(t, i, -0.1, 0.5, true), ConfigError);
  CHECK_THROWS_AS(modality_dropout_fuse(t, oracle::random_matrix(2, 4, g), 0.4, 0.5, true), DimensionError);
}

TEST_CASE("branch frequencies at p_net 0.4") {
  Rng rng(16);
  std::size_t counts[3] = {0, 0, 0};
  const std::size_t n = 100000;
  for (std::size_t k = 0; k < n; ++k) {
    FusionSchedule s = FusionSchedule::sample(0.4, 1, rng);
    ++counts[static_cast<int>(select_fusion_branch(0.4, s.u[0]))];
  }
  CHECK(std::abs(counts[0] / double(n) - 0.2) < 0.01);
  CHECK(std::abs(counts[1] / double(n) - 0.2) < 0.01);
  CHECK(std::abs(counts[2] / double(n) - 0.6) < 0.01);
}

TEST_CASE("single query with one layer yields a query-aligned memory") {
  Model model(tiny(1), 17);
  ContextEncoding enc = encode_context(std::vector<Utterance>{{Speaker::user, {5, 6, 7, 8}, {}}}, model,
                                       FusionSchedule::inference(1));
  CHECK(enc.memory.shape() == Shape{4, 8});
  CHECK(enc.image_fallbacks == 1);
}

TEST_CASE("encoding is deterministic in inference mode") {
  Model model(tiny(), 18);
  std::vector<Utterance> u{{Speaker::user, {5, 6}, features(1, 5, 1)}, {Speaker::system, {7, 8, 9}, {}}};
  Tensor a = encode_context(u, model, FusionSchedule::inference(2)).memory;
  Tensor b = encode_context(u, model, FusionSchedule::inference(2)).memory;
  CHECK(same(a, b));
}

TEST_CASE("history hand-off across utterances") {
  Model model(tiny(), 19);
  std::vector<Utterance> u{{Speaker::user, {5, 6, 7}, features(2, 5, 2)},
                           {Speaker::system, {kImgCtx}, features(1, 5, 3)},
                           {Speaker::user, {8, 9, 10, 11}, {}},
                           {Speaker::user, {6, 6}, features(1, 5, 4)}};
  EncoderState state;
  ContextEncoding enc = encode_context(u, model, FusionSchedule::inference(2), &state);
  REQUIRE(state.utterances.size() == 4);
  CHECK(same(state.utterances[0].layers[0].history_in, model.history()));
  for (std::size_t c = 1; c < 4; ++c) {
    const auto& prev = state.utterances[c - 1].layers.back().history_out;
    const auto& h0 = state.utterances[c].layers.front().history_in;
    CHECK(h0.shape() == prev.shape());
    CHECK(same(h0, prev));
  }
  for (const auto& us : state.utterances)
    for (const auto& ls : us.layers) {
      CHECK(ls.fused.shape() == ls.text.shape());
      CHECK(ls.branch == FusionBranch::mean);
    }
  CHECK(same(enc.memory, state.utterances.back().layers.back().history_out));
  // Within an utterance, layer l+1 reads the history written by layer l.
  CHECK(same(state.utterances[1].layers[1].history_in, state.utterances[1].layers[0].history_out));
}

TEST_CASE("text-only utterances fall back to the text stream") {
  Model model(tiny(), 20);
  EncoderState state;
  std::vector<Utterance> u{{Speaker::user, {5, 6, 7}, {}}};
  encode_context(u, model, FusionSchedule::inference(2), &state);
  CHECK(state.utterances[0].image_fallback);
  for (const auto& ls : state.utterances[0].layers) {
    CHECK(same(ls.image, ls.text));
    CHECK(same(ls.fused, ls.text));
  }
}

TEST_CASE("fused features are one of the three candidates in training") {
  Model model(tiny(), 21);
  Rng rng(22);
  std::vector<Utterance> u{{Speaker::user, {5, 6, 7}, features(2, 5, 5)}};
  for (int trial = 0; trial < 20; ++trial) {
    EncoderState state;
    encode_context(u, model, FusionSchedule::sample(0.6, 2, rng), &state);
    for (const auto& ls : state.utterances[0].layers) {
      const Tensor avg = scale(add(ls.text, ls.image), 0.5);
      CHECK((same(ls.fused, ls.text) || same(ls.fused, ls.image) || same(ls.fused, avg)));
    }
  }
}

TEST_CASE("padding does not change the encoding of real positions") {
  ModelConfig cfg = tiny();
  cfg.max_len = 12;
  Model model(cfg, 23);
  Utterance ctx{Speaker::user, {5, 6, 7}, features(2, 5, 6)};
  Utterance q{Speaker::user, {8, 9}, features(1, 5, 7)};
  Utterance ctx_pad = ctx, q_pad = q;
  ctx_pad.tokens.resize(cfg.max_len, kPad);
  q_pad.tokens.resize(cfg.max_len, kPad);
  Tensor a = encode_context(std::vector<Utterance>{ctx, q}, model, FusionSchedule::inference(2)).memory;
  ContextEncoding pb = encode_context(std::vector<Utterance>{ctx_pad, q_pad}, model, FusionSchedule::inference(2));
  CHECK(pb.memory.rows() == cfg.max_len);
  CHECK(pb.memory_mask[1] == 1);
  CHECK(pb.memory_mask[2] == 0);
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t c = 0; c < 8; ++c) CHECK(std::abs(a.at(r, c) - pb.memory.at(r, c)) < 1e-6);
}

TEST_CASE("encode_context contracts") {
  Model model(tiny(), 24);
  CHECK_THROWS_AS(encode_context(std::vector<Utterance>{}, model, FusionSchedule::inference(2)), ContractError);
  std::vector<Utterance> too_many(5, Utterance{Speaker::user, {5}, {}});
  CHECK_THROWS_AS(encode_context(too_many, model, FusionSchedule::inference(2)), ContractError);
  CHECK_THROWS_AS(encode_context(std::vector<Utterance>{{Speaker::user, {5}, {}}}, model, FusionSchedule::inference(1)),
                  ContractError);
}

TEST_CASE("encoder inputs keep the most recent turns") {
  DialogueSample s;
  for (int i = 0; i < 4; ++i) s.context.push_back({Speaker::user, {5 + i}, {}});
  s.query = {Speaker::user, {11}, {}};
  auto in = encoder_inputs(s, 2);
  REQUIRE(in.size() == 3);
  CHECK(in[0].tokens[0] == 7);
  CHECK(in[1].tokens[0] == 8);
  CHECK(in[2].tokens[0] == 11);
}

TEST_CASE("encoder layers pass gradient checks") {
  Model model(tiny(), 25);
  const EncoderLayerParams& layer = model.encoder_layers()[0];
  std::mt19937_64 g(26);
  Tensor t = oracle::random_matrix(3, 8, g, true), img = oracle::random_matrix(2, 8, g, true);
  Tensor hist = oracle::random_matrix(4, 8, g, true);
  Tensor w = oracle::random_matrix(3, 8, g);
  auto text_loss = [&] { return sum(mul(text_stream_layer(t, {1, 1, 0}, layer), w)); };
  auto image_loss = [&] { return sum(mul(image_stream_layer(t, img, nullptr, layer), w)); };
  auto hist_loss = [&] { return sum(mul(history_update(t, hist, {1, 1, 1, 0}, layer), w)); };
  CHECK(oracle::fd_max_rel_error(text_loss, t) < 1e-4);
  for (Tensor p : {layer.text_attn.w_q, layer.text_norm.gain}) CHECK(oracle::fd_max_rel_error(text_loss, p) < 1e-4);
  CHECK(oracle::fd_max_rel_error(image_loss, t) < 1e-4);
  CHECK(oracle::fd_max_rel_error(image_loss, img) < 1e-4);
  CHECK(oracle::fd_max_rel_error(hist_loss, hist) < 1e-4);
  for (Tensor p : {layer.history_ffn.w1, layer.history_ffn_norm.bias}) CHECK(oracle::fd_max_rel_error(hist_loss, p) < 1e-4);
}

TEST_CASE("whole-model gradient check covers the history parameter") {
  GradCheckReport r = grad_check_model(gradcheck_config(), 7);
  CHECK(r.passed);
  CHECK(r.max_rel_error < 1e-4);
  bool saw_history = false;
  for (const auto& [name, err] : r.per_parameter) saw_history = saw_history || name == "history";
  CHECK(saw_history);
}

}  // TEST_SUITE
