#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "nrvit/encoder.hpp"
#include "nrvit/objectives.hpp"

namespace nrvit {

// A named view over one parameter (or gradient) array. Eigen dense storage is
// contiguous, so a (pointer, size) pair covers every tensor we own.
template <typename T>
struct ParamView {
  std::string name;
  T* data = nullptr;
  long size = 0;
  std::vector<long> shape;  // row-major
};

// Both towers plus the alignment head; the teacher exists only while a stage
// plan asks for distillation.
template <typename T>
struct ModelState {
  EncoderState<T> vision;
  TextTower<T> text;
  AlignmentHead<T> head;
  std::optional<TeacherStub<T>> teacher;
  int trained_through_stage = 0;
};

namespace detail {

template <typename T, typename M>
void add_view(std::vector<ParamView<T>>& out, const std::string& name, M& m) {
  std::vector<long> shape;
  if (m.cols() == 1)
    shape = {static_cast<long>(m.rows())};
  else
    shape = {static_cast<long>(m.rows()), static_cast<long>(m.cols())};
  out.push_back({name, const_cast<T*>(m.data()), static_cast<long>(m.size()),
                 std::move(shape)});
}

template <typename T, typename Stack>
void collect_stack(std::vector<ParamView<T>>& out, const std::string& prefix,
                   Stack& s) {
  for (std::size_t i = 0; i < s.layers.size(); ++i) {
    auto& l = s.layers[i];
    const std::string base = prefix + ".layers." + std::to_string(i) + ".";
    add_view<T>(out, base + "norm1_g", l.norm1_g);
    add_view<T>(out, base + "attn.wq", l.wq);
    add_view<T>(out, base + "attn.wk", l.wk);
    add_view<T>(out, base + "attn.wv", l.wv);
    add_view<T>(out, base + "attn.wo", l.wo);
    add_view<T>(out, base + "attn.q_g", l.q_g);
    add_view<T>(out, base + "attn.k_g", l.k_g);
    add_view<T>(out, base + "ls_attn", l.ls_attn);
    add_view<T>(out, base + "norm2_g", l.norm2_g);
    add_view<T>(out, base + "ffn.w_gate", l.w_gate);
    add_view<T>(out, base + "ffn.w_up", l.w_up);
    add_view<T>(out, base + "ffn.w_down", l.w_down);
    add_view<T>(out, base + "ffn.norm_g", l.ffn_norm_g);
    add_view<T>(out, base + "ls_ffn", l.ls_ffn);
  }
  add_view<T>(out, prefix + ".final_norm.g", s.final_g);
}

}  // namespace detail

// Deterministic enumeration of every learnable array in the model. Names are
// stable across runs and form the checkpoint schema: the "vision." prefix
// covers the encoder plus its projection, "text." the caption tower plus its
// projection, "teacher." the frozen distillation branch, and "head." the
// loss temperature and bias.
template <typename T>
std::vector<ParamView<T>> collect_params(ModelState<T>& m) {
  std::vector<ParamView<T>> out;
  detail::add_view<T>(out, "vision.patch_embed.w", m.vision.patch_w);
  detail::add_view<T>(out, "vision.patch_embed.b", m.vision.patch_b);
  detail::collect_stack<T>(out, "vision", m.vision.blocks);
  detail::add_view<T>(out, "vision.proj", m.head.w_v);
  detail::add_view<T>(out, "text.embed", m.text.embed);
  detail::collect_stack<T>(out, "text", m.text.trunk);
  detail::add_view<T>(out, "text.proj", m.head.w_t);
  out.push_back({"head.log_t", &m.head.log_temp, 1, {1}});
  out.push_back({"head.b", &m.head.bias, 1, {1}});
  if (m.teacher) {
    detail::add_view<T>(out, "teacher.patch_embed.w", m.teacher->encoder.patch_w);
    detail::add_view<T>(out, "teacher.patch_embed.b", m.teacher->encoder.patch_b);
    detail::collect_stack<T>(out, "teacher", m.teacher->encoder.blocks);
    detail::add_view<T>(out, "teacher.proj", m.teacher->proj);
  }
  return out;
}

// Gradient bundle matching a full model step.
template <typename T>
struct ModelGrads {
  EncoderGrads<T> vision;
  Mat<T> w_v;
  TextGrads<T> text;
  Mat<T> w_t;
  T log_temp = T(0);
  T bias = T(0);

  explicit ModelGrads(ModelState<T>& m)
      : vision(m.vision),
        w_v(Mat<T>::Zero(m.head.w_v.rows(), m.head.w_v.cols())),
        text(m.text),
        w_t(Mat<T>::Zero(m.head.w_t.rows(), m.head.w_t.cols())) {}
};

// Same naming and ordering as collect_params, restricted to trainable groups
// (the teacher never appears: it receives no gradients by construction).
template <typename T>
std::vector<ParamView<T>> collect_grads(ModelGrads<T>& g) {
  std::vector<ParamView<T>> out;
  detail::add_view<T>(out, "vision.patch_embed.w", g.vision.patch_w);
  detail::add_view<T>(out, "vision.patch_embed.b", g.vision.patch_b);
  detail::collect_stack<T>(out, "vision", g.vision.blocks);
  detail::add_view<T>(out, "vision.proj", g.w_v);
  detail::add_view<T>(out, "text.embed", g.text.embed);
  detail::collect_stack<T>(out, "text", g.text.trunk);
  detail::add_view<T>(out, "text.proj", g.w_t);
  out.push_back({"head.log_t", &g.log_temp, 1, {1}});
  out.push_back({"head.b", &g.bias, 1, {1}});
  return out;
}

template <typename T>
bool name_has_prefix(const ParamView<T>& p, const std::string& prefix) {
  return p.name.rfind(prefix, 0) == 0;
}

}  // namespace nrvit
