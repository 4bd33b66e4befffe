#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "avw2/beamform.h"
#include "avw2/cli.h"
#include "avw2/ctc.h"
#include "avw2/trainer.h"

namespace py = pybind11;
using namespace avw2;
using nlohmann::json;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;
using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

ad::Tensor<double> toTensor(const Array& a, bool param) {
  ad::Shape shape(a.shape(), a.shape() + a.ndim());
  std::vector<double> v(a.data(), a.data() + a.size());
  return param ? ad::Tensor<double>::parameter(shape, std::move(v)) : ad::Tensor<double>::constant(shape, std::move(v));
}

Array toArray(const std::vector<double>& v, const ad::Shape& shape) {
  std::vector<py::ssize_t> dims(shape.begin(), shape.end());
  Array out(dims);
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

FloatArray toFloatArray(const std::vector<float>& v) {
  FloatArray out(std::vector<py::ssize_t>{static_cast<py::ssize_t>(v.size())});
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

std::vector<float> toFloats(const FloatArray& a) {
  return {a.data(), a.data() + a.size()};
}

py::dict recordDict(const StepRecord& r) {
  py::dict d;
  d["step"] = r.step;
  d["kind"] = batchKindName(r.kind);
  d["l_c1"] = r.loss.c1;
  d["l_c2"] = r.loss.c2;
  d["l_sa"] = r.loss.sa;
  d["total"] = r.loss.total;
  d["lr"] = r.lr;
  d["clips"] = r.clipIds;
  return d;
}

PretrainConfig pretrainConfig(const std::string& overrides) {
  json j = toJson(PretrainConfig{});
  if (!overrides.empty()) {
    const json patch = json::parse(overrides);
    for (const auto& [k, v] : patch.items()) {
      applyOverride(j, k + "=" + v.dump());
    }
  }
  return pretrainConfigFromJson(j);
}

FinetuneConfig finetuneConfig(const std::string& overrides) {
  json j = toJson(FinetuneConfig{});
  if (!overrides.empty()) {
    const json patch = json::parse(overrides);
    for (const auto& [k, v] : patch.items()) {
      applyOverride(j, k + "=" + v.dump());
    }
  }
  return finetuneConfigFromJson(j);
}

} // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Audio-visual multichannel masked contrastive pretraining (C++ core)";

  static py::exception<Error> error(m, "Error");
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) {
        std::rethrow_exception(p);
      }
    } catch (const Error& e) {
      PyErr_SetString(error.ptr(), (std::string(errorKindName(e.kind())) + ": " + e.what()).c_str());
    }
  });

  m.attr("VOCAB_SIZE") = kVocabSize;
  m.attr("SAMPLES_PER_FRAME") = kSamplesPerFrame;

  py::class_<MultichannelClip>(m, "Clip")
      .def_readonly("id", &MultichannelClip::id)
      .def_readonly("transcript", &MultichannelClip::transcript)
      .def_readonly("video_frames", &MultichannelClip::videoFrames)
      .def_property_readonly("num_channels", &MultichannelClip::numChannels)
      .def_property_readonly("channels",
                             [](const MultichannelClip& c) {
                               py::list out;
                               for (const auto& ch : c.channels) {
                                 out.append(toFloatArray(ch));
                               }
                               return out;
                             })
      .def_property_readonly("video",
                             [](const MultichannelClip& c) {
                               auto a = toFloatArray(c.video);
                               return c.hasVideo() ? a.reshape({c.videoFrames, py::ssize_t{16}, py::ssize_t{16}}) : a;
                             })
      .def_property_readonly("delays", [](const MultichannelClip& c) { return c.meta.delays; })
      .def_property_readonly("snrs_db", [](const MultichannelClip& c) { return c.meta.snrsDb; })
      .def("__eq__", [](const MultichannelClip& a, const MultichannelClip& b) { return a == b; });

  m.def(
      "gen_clip",
      [](const Transcript& tokens, double duration, const std::vector<int>& delays,
         const std::vector<double>& snrsDb, std::uint64_t seed, bool withVideo, const std::string& id) {
        ClipSpec s;
        s.id = id;
        s.tokens = tokens;
        s.channels = static_cast<int>(delays.size());
        s.durationSec = duration;
        s.delays = delays;
        s.snrsDb = snrsDb;
        s.seed = seed;
        s.withVideo = withVideo;
        return genClip(s);
      },
      py::arg("tokens"), py::arg("duration"), py::arg("delays"), py::arg("snrs_db"), py::arg("seed") = 0,
      py::arg("with_video") = true, py::arg("id") = "clip");

  m.def(
      "gen_corpus",
      [](int clips, int channels, double duration, std::uint64_t seed, double snrMin, double snrMax, bool withVideo,
         int threads) {
        CorpusConfig c;
        c.clips = clips;
        c.channels = channels;
        c.durationSec = duration;
        c.seed = seed;
        c.snrMinDb = snrMin;
        c.snrMaxDb = snrMax;
        c.withVideo = withVideo;
        return genCorpus(c, threads);
      },
      py::arg("clips") = 64, py::arg("channels") = 6, py::arg("duration") = 2.0, py::arg("seed") = 7,
      py::arg("snr_min_db") = 5.0, py::arg("snr_max_db") = 20.0, py::arg("with_video") = true,
      py::arg("threads") = 1);
  m.def(
      "write_corpus",
      [](const std::vector<MultichannelClip>& clips, const std::filesystem::path& dir) { writeCorpus(clips, dir); },
      py::arg("clips"), py::arg("path"));
  m.def(
      "read_corpus", [](const std::filesystem::path& dir) { return readCorpus(dir); }, py::arg("path"));

  m.def(
      "num_frames", [](std::int64_t samples) { return numFrames(AudioEncoderConfig{}, samples); },
      py::arg("samples"));

  m.def(
      "estimate_tdoa",
      [](const FloatArray& ref, const FloatArray& ch, int maxLag) {
        const auto a = toFloats(ref), b = toFloats(ch);
        return estimateTdoa(a, b, maxLag);
      },
      py::arg("reference"), py::arg("channel"), py::arg("max_lag") = 16);
  m.def(
      "delay_and_sum",
      [](const std::vector<FloatArray>& channels, const std::vector<int>& delays, std::vector<double> weights) {
        std::vector<std::vector<float>> chans;
        for (const auto& c : channels) {
          chans.push_back(toFloats(c));
        }
        BeamformPlan plan = weights.empty() ? BeamformPlan::uniform(delays) : BeamformPlan{delays, weights};
        return toFloatArray(delayAndSum(chans, plan));
      },
      py::arg("channels"), py::arg("delays"), py::arg("weights") = std::vector<double>{});
  m.def(
      "beamform_clip",
      [](const MultichannelClip& clip, int maxLag) {
        return beamformClip(clip, planBeamform(clip.channels, maxLag));
      },
      py::arg("clip"), py::arg("max_lag") = 16);

  m.def(
      "info_nce",
      [](const Array& pred, const Array& pos, const Array& negatives, double kappa) {
        auto p = toTensor(pred, true);
        const auto loss = infoNce(p, toTensor(pos, false), toTensor(negatives, false), kappa);
        const auto g = ad::backward(loss);
        return py::make_tuple(loss.item(), toArray(g.of(p), p.shape()));
      },
      py::arg("pred"), py::arg("pos"), py::arg("negatives"), py::arg("kappa"),
      "Loss and its gradient with respect to pred.");
  m.def(
      "ctc_loss",
      [](const Array& logProbs, const Transcript& target) {
        auto lp = toTensor(logProbs, true);
        const auto loss = ctcLoss(lp, target);
        const auto g = ad::backward(loss);
        return py::make_tuple(loss.item(), toArray(g.of(lp), lp.shape()));
      },
      py::arg("log_probs"), py::arg("target"), "Loss and its gradient with respect to log_probs.");
  m.def(
      "greedy_decode", [](const Array& logProbs) { return greedyDecode(toTensor(logProbs, false)); },
      py::arg("log_probs"));
  m.def("edit_distance", &editDistance, py::arg("a"), py::arg("b"));
  m.def("cer", &cer, py::arg("hyp"), py::arg("ref"));

  py::class_<Pretrainer>(m, "Pretrainer")
      .def(py::init([](const std::vector<MultichannelClip>& av, const std::string& overrides,
                       const std::vector<MultichannelClip>& audio) {
             return new Pretrainer(pretrainConfig(overrides), av, audio);
           }),
           py::arg("clips"), py::arg("config_json") = "", py::arg("audio_clips") = std::vector<MultichannelClip>{})
      .def_static(
          "resume",
          [](const std::filesystem::path& ckpt, const std::vector<MultichannelClip>& av,
             const std::vector<MultichannelClip>& audio) { return new Pretrainer(loadCheckpoint(ckpt), av, audio); },
          py::arg("checkpoint"), py::arg("clips"), py::arg("audio_clips") = std::vector<MultichannelClip>{})
      .def("step", [](Pretrainer& t) { return recordDict(t.step()); })
      .def(
          "run",
          [](Pretrainer& t, int steps) {
            py::list out;
            for (const auto& r : t.run(steps)) {
              out.append(recordDict(r));
            }
            return out;
          },
          py::arg("steps"))
      .def_property_readonly("current_step", &Pretrainer::currentStep)
      .def("config_json", [](const Pretrainer& t) { return toJson(t.config()).dump(); })
      .def(
          "rank_accuracy",
          [](const Pretrainer& t, const std::vector<MultichannelClip>& clips, std::uint64_t seed) {
            return maskedRankAccuracy(t.model(), clips, t.config(), seed);
          },
          py::arg("clips"), py::arg("seed") = 1)
      .def(
          "save", [](const Pretrainer& t, const std::filesystem::path& p) { saveCheckpoint(t.checkpoint(), p); },
          py::arg("path"));

  py::class_<Finetuner>(m, "Finetuner")
      .def(py::init([](const std::vector<MultichannelClip>& clips, const std::string& overrides,
                       const std::filesystem::path& init) {
             const auto cfg = finetuneConfig(overrides);
             AvModel<float> model;
             if (init.empty()) {
               ModelConfig mc;
               mc.channels = clips.front().numChannels();
               model = AvModel<float>(mc, cfg.seed);
             } else {
               model = modelFromCheckpoint(loadCheckpoint(init));
             }
             return new Finetuner(cfg, std::move(model), clips);
           }),
           py::arg("clips"), py::arg("config_json") = "", py::arg("init") = std::filesystem::path())
      .def("step", [](Finetuner& t) { return t.step().loss.total; })
      .def(
          "run", [](Finetuner& t, int steps) { return t.run(steps); }, py::arg("steps"),
          "Trains `steps` steps; returns [(step, training CER)] at each evaluation.")
      .def_property_readonly("current_step", &Finetuner::currentStep)
      .def(
          "cer",
          [](const Finetuner& t, const std::vector<MultichannelClip>& clips) {
            return evaluateCer(t.model(), clips, t.config().modality).cer;
          },
          py::arg("clips"))
      .def(
          "save", [](const Finetuner& t, const std::filesystem::path& p) { saveCheckpoint(t.checkpoint(), p); },
          py::arg("path"));

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        const int code = runCli(args, out, err);
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs the command-line tool in process; returns (exit code, stdout, stderr).");
}
