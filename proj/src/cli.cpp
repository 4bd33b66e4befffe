#include "avw2/cli.h"

#include <CLI11.hpp>

#include <cstdlib>
#include <iomanip>
#include <iostream>
#include <nlohmann/json.hpp>

#include "avw2/beamform.h"
#include "avw2/trainer.h"

namespace avw2 {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kCheckpointName = "checkpoint.avw2";

struct ConfigInputs {
  std::string file;
  std::vector<std::string> sets;

  void attach(CLI::App* app) {
    app->add_option("--config", file, "JSON config file; flags override its keys")->check(CLI::ExistingFile);
    app->add_option("--set", sets, "Override a config key, e.g. --set loss.temperature=0.05");
  }
};

// Copies keys of `patch` into `base`; every key must already exist.
void mergeKnown(json& root, json& base, const json& patch, const std::string& path) {
  if (!patch.is_object()) {
    fail(ErrorKind::Usage, "config " + (path.empty() ? std::string("file") : "key '" + path + "'") +
                               " must be a JSON object");
  }
  for (const auto& [key, value] : patch.items()) {
    const std::string full = path.empty() ? key : path + "." + key;
    if (!base.contains(key)) {
      fail(ErrorKind::Usage, "unknown config key '" + full + "'");
    }
    if (base[key].is_object() && value.is_object()) {
      mergeKnown(root, base[key], value, full);
    } else {
      applyOverride(root, full + "=" + value.dump());
    }
  }
}

json readJsonFile(const fs::path& path) {
  std::ifstream in(path);
  if (!in) {
    fail(ErrorKind::Usage, "cannot read config file " + path.string());
  }
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) {
    fail(ErrorKind::Usage, "config file " + path.string() + " is not valid JSON");
  }
  return j;
}

// Defaults <- config file <- explicit flags <- --set overrides.
json resolveConfig(json defaults, const ConfigInputs& in, const std::vector<std::string>& flagSets) {
  if (!in.file.empty()) {
    mergeKnown(defaults, defaults, readJsonFile(in.file), "");
  }
  for (const auto& s : flagSets) {
    applyOverride(defaults, s);
  }
  for (const auto& s : in.sets) {
    applyOverride(defaults, s);
  }
  return defaults;
}

template <typename V>
void flag(std::vector<std::string>& sets, const CLI::Option* opt, const std::string& key, const V& value) {
  if (opt->count() > 0) {
    sets.push_back(key + "=" + json(value).dump());
  }
}

void writeSnapshot(const fs::path& dir, const std::string& command, json inputs, json resolved) {
  json snap = {{"command", command}, {"inputs", std::move(inputs)}, {"config", std::move(resolved)}};
  writeFileAtomic(dir / "config.json", snap.dump(2) + "\n");
}

int threadsFromEnv() {
  const char* v = std::getenv("AVW2_THREADS");
  if (!v || !*v) {
    return 1;
  }
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (*end != '\0' || n < 1) {
    fail(ErrorKind::Usage, std::string("AVW2_THREADS must be a positive integer, got '") + v + "'");
  }
  return static_cast<int>(n);
}

json corpusConfigJson(const CorpusConfig& c) {
  return {{"clips", c.clips},           {"channels", c.channels},   {"duration_sec", c.durationSec},
          {"min_tokens", c.minTokens},  {"max_tokens", c.maxTokens}, {"snr_min_db", c.snrMinDb},
          {"snr_max_db", c.snrMaxDb},   {"max_delay", c.maxDelay},  {"seed", c.seed},
          {"with_video", c.withVideo},  {"id_prefix", c.idPrefix}};
}

CorpusConfig corpusConfigFromJson(const json& j) {
  CorpusConfig c;
  c.clips = j.at("clips").get<int>();
  c.channels = j.at("channels").get<int>();
  c.durationSec = j.at("duration_sec").get<double>();
  c.minTokens = j.at("min_tokens").get<int>();
  c.maxTokens = j.at("max_tokens").get<int>();
  c.snrMinDb = j.at("snr_min_db").get<double>();
  c.snrMaxDb = j.at("snr_max_db").get<double>();
  c.maxDelay = j.at("max_delay").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.withVideo = j.at("with_video").get<bool>();
  c.idPrefix = j.at("id_prefix").get<std::string>();
  if (c.clips < 1 || c.channels < 1 || c.maxDelay < 0 || c.maxDelay > kMaxDelay) {
    fail(ErrorKind::Usage, "gen-data: clips and channels must be positive, max delay within 0.." +
                               std::to_string(kMaxDelay));
  }
  return c;
}

void writeSummary(const fs::path& path, const std::string& header,
                  const std::vector<std::vector<std::string>>& rows) {
  std::string s = header + "\n";
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      s += (i ? "," : "") + row[i];
    }
    s += "\n";
  }
  writeFileAtomic(path, s);
}

std::string fmt(double v) {
  std::ostringstream ss;
  ss << std::setprecision(6) << v;
  return ss.str();
}

} // namespace

int runCli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Audio-visual multichannel masked contrastive pretraining at desk scale", "avw2"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic multichannel audio-visual corpus");
  CorpusConfig corpus;
  std::string genOut;
  ConfigInputs genCfg;
  gen->add_option("--out", genOut, "Output corpus directory")->required();
  auto* gSeed = gen->add_option("--seed", corpus.seed, "Generation seed");
  auto* gClips = gen->add_option("--clips", corpus.clips, "Number of clips");
  auto* gChannels = gen->add_option("--channels", corpus.channels, "Microphone channels per clip");
  auto* gDuration = gen->add_option("--duration", corpus.durationSec, "Clip duration in seconds");
  auto* gSnrMin = gen->add_option("--snr-min", corpus.snrMinDb, "Lowest per-channel SNR (dB)");
  auto* gSnrMax = gen->add_option("--snr-max", corpus.snrMaxDb, "Highest per-channel SNR (dB)");
  auto* gDelay = gen->add_option("--max-delay", corpus.maxDelay, "Largest |delay| in samples");
  auto* gPrefix = gen->add_option("--id-prefix", corpus.idPrefix, "Clip id prefix");
  bool noVideo = false;
  gen->add_flag("--no-video", noVideo, "Audio-only corpus");
  genCfg.attach(gen);

  // beamform
  auto* bf = app.add_subcommand("beamform", "Delay-and-sum a multichannel corpus into a mono corpus");
  std::string bfCorpus, bfOut, bfWeighting = "uniform";
  int maxLag = 16;
  bool oracleDelays = false;
  bf->add_option("--corpus", bfCorpus, "Input corpus directory")->required();
  bf->add_option("--out", bfOut, "Output corpus directory")->required();
  bf->add_option("--max-lag", maxLag, "TDOA search range in samples");
  bf->add_option("--weighting", bfWeighting, "uniform or inverse-energy")
      ->check(CLI::IsMember({"uniform", "inverse-energy"}));
  bf->add_flag("--oracle-delays", oracleDelays, "Use the delays recorded in the manifest");

  // pretrain
  auto* pre = app.add_subcommand("pretrain", "Masked contrastive pre-training");
  std::string preCorpus, preAudio, preOut, preResume;
  int steps = 0, batch = 0, stopAfter = 0;
  std::uint64_t seed = 0;
  double lr = 0.0, mix = 0.0;
  ConfigInputs preCfg;
  pre->add_option("--corpus", preCorpus, "Audio-visual multichannel corpus")->required();
  pre->add_option("--audio-corpus", preAudio, "Single-channel audio-only corpus");
  pre->add_option("--out", preOut, "Output directory")->required();
  auto* pSteps = pre->add_option("--steps", steps, "Training steps");
  auto* pSeed = pre->add_option("--seed", seed, "Training seed");
  auto* pBatch = pre->add_option("--batch-size", batch, "Clips per step");
  auto* pLr = pre->add_option("--lr", lr, "Peak learning rate");
  auto* pMix = pre->add_option("--mix-ratio", mix, "Fraction of audio-only batches");
  pre->add_option("--resume", preResume, "Continue from a pre-training checkpoint");
  pre->add_option("--stop-after", stopAfter, "Stop after this many steps of the schedule");
  preCfg.attach(pre);

  // finetune
  auto* ft = app.add_subcommand("finetune", "CTC fine-tuning on labelled clips");
  std::string ftCorpus, ftInit, ftOut, modality = "av";
  std::vector<std::string> freeze;
  int ftSteps = 0, evalEvery = 0;
  std::uint64_t ftSeed = 0;
  double ftLr = 0.0;
  ConfigInputs ftCfg;
  ft->add_option("--corpus", ftCorpus, "Labelled corpus")->required();
  ft->add_option("--init", ftInit, "Pre-trained checkpoint (random init when omitted)");
  ft->add_option("--out", ftOut, "Output directory")->required();
  auto* fSteps = ft->add_option("--steps", ftSteps, "Training steps");
  auto* fSeed = ft->add_option("--seed", ftSeed, "Seed");
  auto* fLr = ft->add_option("--lr", ftLr, "Learning rate");
  auto* fMod = ft->add_option("--modality", modality, "av, audio or video")
                   ->check(CLI::IsMember({"av", "audio", "video"}));
  auto* fFreeze = ft->add_option("--freeze", freeze, "encoders, context or all")
                      ->check(CLI::IsMember({"encoders", "context", "all"}));
  auto* fEval = ft->add_option("--eval-every", evalEvery, "Evaluate training CER every N steps");
  ftCfg.attach(ft);

  // eval-asr
  auto* ev = app.add_subcommand("eval-asr", "CER of a fine-tuned model on multichannel and beamformed input");
  std::string evCkpt, evCorpus, evBeam, evOut, evModality = "av";
  ev->add_option("--checkpoint", evCkpt, "Fine-tuned checkpoint")->required();
  ev->add_option("--corpus", evCorpus, "Multichannel corpus")->required();
  ev->add_option("--beamformed", evBeam, "Beamformed corpus (computed on the fly when omitted)");
  ev->add_option("--out", evOut, "Directory for summary.csv");
  ev->add_option("--modality", evModality, "av or audio")->check(CLI::IsMember({"av", "audio"}));

  // extract-features
  auto* ex = app.add_subcommand("extract-features", "Write unmasked context features per clip");
  std::string exCkpt, exCorpus, exOut;
  ex->add_option("--checkpoint", exCkpt, "Checkpoint")->required();
  ex->add_option("--corpus", exCorpus, "Corpus")->required();
  ex->add_option("--out", exOut, "Output directory")->required();

  // inspect-checkpoint
  auto* in = app.add_subcommand("inspect-checkpoint", "Print checkpoint metadata");
  std::string inPath;
  in->add_option("checkpoint", inPath, "Checkpoint file")->required();

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (gen->parsed()) {
      std::vector<std::string> sets;
      flag(sets, gSeed, "seed", corpus.seed);
      flag(sets, gClips, "clips", corpus.clips);
      flag(sets, gChannels, "channels", corpus.channels);
      flag(sets, gDuration, "duration_sec", corpus.durationSec);
      flag(sets, gSnrMin, "snr_min_db", corpus.snrMinDb);
      flag(sets, gSnrMax, "snr_max_db", corpus.snrMaxDb);
      flag(sets, gDelay, "max_delay", corpus.maxDelay);
      flag(sets, gPrefix, "id_prefix", corpus.idPrefix);
      if (noVideo) {
        sets.push_back("with_video=false");
      }
      const json resolved = resolveConfig(corpusConfigJson(CorpusConfig{}), genCfg, sets);
      const auto cfg = corpusConfigFromJson(resolved);
      const auto clips = genCorpus(cfg, threadsFromEnv());
      writeCorpus(clips, genOut);
      writeSnapshot(genOut, "gen-data", json::object(), resolved);
      out << "wrote " << clips.size() << " clips to " << genOut << "\n";
    } else if (bf->parsed()) {
      const auto clips = readCorpus(fs::path(bfCorpus));
      std::vector<MultichannelClip> mono;
      for (const auto& clip : clips) {
        if (clip.meta.beamformed) {
          fail(ErrorKind::Data, "clip '" + clip.id + "' is already beamformed");
        }
        BeamformPlan plan;
        if (oracleDelays) {
          plan = BeamformPlan::uniform(clip.meta.delays);
        } else {
          plan = planBeamform(clip.channels, maxLag,
                              bfWeighting == "uniform" ? BeamWeighting::Uniform : BeamWeighting::InverseEnergy);
        }
        mono.push_back(beamformClip(clip, plan));
      }
      writeCorpus(mono, bfOut);
      writeSnapshot(bfOut, "beamform", {{"corpus", bfCorpus}},
                    {{"max_lag", maxLag}, {"weighting", bfWeighting}, {"oracle_delays", oracleDelays}});
      out << "beamformed " << mono.size() << " clips to " << bfOut << "\n";
    } else if (pre->parsed()) {
      auto av = readCorpus(fs::path(preCorpus));
      std::vector<MultichannelClip> audio;
      if (!preAudio.empty()) {
        audio = readCorpus(fs::path(preAudio));
      }
      std::unique_ptr<Pretrainer> trainer;
      json resolved;
      if (!preResume.empty()) {
        if (!preCfg.file.empty() || !preCfg.sets.empty() || pSteps->count() || pSeed->count() ||
            pBatch->count() || pLr->count() || pMix->count()) {
          fail(ErrorKind::Usage, "config conflict: --resume takes its configuration from the checkpoint");
        }
        trainer = std::make_unique<Pretrainer>(loadCheckpoint(preResume), std::move(av), std::move(audio));
        resolved = toJson(trainer->config());
      } else {
        PretrainConfig defaults;
        defaults.model.channels = av.front().numChannels();
        std::vector<std::string> sets;
        flag(sets, pSteps, "steps", steps);
        flag(sets, pSeed, "seed", seed);
        flag(sets, pBatch, "batch_size", batch);
        flag(sets, pLr, "learning_rate", lr);
        flag(sets, pMix, "mix_ratio", mix);
        resolved = resolveConfig(toJson(defaults), preCfg, sets);
        trainer = std::make_unique<Pretrainer>(pretrainConfigFromJson(resolved), std::move(av),
                                               std::move(audio));
      }
      fs::create_directories(preOut);
      writeSnapshot(preOut, "pretrain",
                    {{"corpus", preCorpus}, {"audio_corpus", preAudio}, {"resume", preResume},
                     {"mix_ratio_resolved", trainer->mixRatio()}},
                    resolved);
      const int remaining = trainer->config().steps - trainer->currentStep();
      const int todo = stopAfter > 0 ? std::min(remaining, stopAfter - trainer->currentStep()) : remaining;
      MetricsLog log(fs::path(preOut) / "metrics.jsonl", !preResume.empty());
      const auto records = trainer->run(std::max(0, todo), &log);
      saveCheckpoint(trainer->checkpoint(), fs::path(preOut) / kCheckpointName);
      const auto clips = readCorpus(fs::path(preCorpus));
      const double acc = maskedRankAccuracy(trainer->model(), clips, trainer->config(), trainer->config().seed);
      writeSummary(fs::path(preOut) / "summary.csv", "step,rank_accuracy",
                   {{std::to_string(trainer->currentStep()), fmt(acc)}});
      out << "step=" << trainer->currentStep();
      if (!records.empty()) {
        out << " total=" << fmt(records.back().loss.total);
      }
      out << " rank_accuracy=" << fmt(acc) << "\n";
    } else if (ft->parsed()) {
      auto clips = readCorpus(fs::path(ftCorpus));
      std::vector<std::string> sets;
      flag(sets, fSteps, "steps", ftSteps);
      flag(sets, fSeed, "seed", ftSeed);
      flag(sets, fLr, "learning_rate", ftLr);
      flag(sets, fMod, "modality", modality);
      flag(sets, fEval, "eval_every", evalEvery);
      if (fFreeze->count()) {
        for (const auto& f : freeze) {
          sets.push_back("freeze_" + f + "=true");
        }
      }
      const json resolved = resolveConfig(toJson(FinetuneConfig{}), ftCfg, sets);
      const auto cfg = finetuneConfigFromJson(resolved);
      AvModel<float> model;
      json pretrainSnap;
      if (!ftInit.empty()) {
        const auto ckpt = loadCheckpoint(ftInit);
        model = modelFromCheckpoint(ckpt);
        pretrainSnap = ckpt.config;
      } else {
        ModelConfig mc;
        mc.channels = clips.front().numChannels();
        model = AvModel<float>(mc, cfg.seed);
      }
      Finetuner tuner(cfg, std::move(model), std::move(clips));
      fs::create_directories(ftOut);
      writeSnapshot(ftOut, "finetune", {{"corpus", ftCorpus}, {"init", ftInit}, {"pretrain", pretrainSnap}},
                    resolved);
      MetricsLog log(fs::path(ftOut) / "metrics.jsonl", false);
      const auto history = tuner.run(cfg.steps, &log);
      saveCheckpoint(tuner.checkpoint(), fs::path(ftOut) / kCheckpointName);
      std::vector<std::vector<std::string>> rows;
      for (const auto& [s, c] : history) {
        rows.push_back({std::to_string(s), fmt(c)});
      }
      writeSummary(fs::path(ftOut) / "summary.csv", "step,train_cer", rows);
      out << "step=" << tuner.currentStep() << " train_cer=" << fmt(history.back().second) << "\n";
    } else if (ev->parsed()) {
      const auto model = modelFromCheckpoint(loadCheckpoint(evCkpt));
      const auto clips = readCorpus(fs::path(evCorpus));
      std::vector<MultichannelClip> mono;
      if (!evBeam.empty()) {
        mono = readCorpus(fs::path(evBeam));
      } else {
        for (const auto& clip : clips) {
          mono.push_back(beamformClip(clip, planBeamform(clip.channels, kMaxDelay)));
        }
      }
      const auto m = parseModality(evModality);
      const auto multi = evaluateCer(model, clips, m);
      const auto beam = evaluateCer(model, mono, m);
      out << "condition,cer\n";
      out << "multichannel," << fmt(multi.cer) << "\n";
      out << "beamformed," << fmt(beam.cer) << "\n";
      if (!evOut.empty()) {
        writeSummary(fs::path(evOut) / "summary.csv", "condition,cer",
                     {{"multichannel", fmt(multi.cer)}, {"beamformed", fmt(beam.cer)}});
        writeSnapshot(evOut, "eval-asr", {{"checkpoint", evCkpt}, {"corpus", evCorpus}, {"beamformed", evBeam}},
                      {{"modality", evModality}});
      }
    } else if (ex->parsed()) {
      const auto model = modelFromCheckpoint(loadCheckpoint(exCkpt));
      const auto clips = readCorpus(fs::path(exCorpus));
      extractFeatures(model, clips, exOut);
      writeSnapshot(exOut, "extract-features", {{"checkpoint", exCkpt}, {"corpus", exCorpus}}, json::object());
      out << "wrote features for " << clips.size() << " clips to " << exOut << "\n";
    } else if (in->parsed()) {
      const auto ckpt = loadCheckpoint(inPath);
      out << "version=" << ckpt.version << "\n";
      out << "kind=" << ckpt.config.value("kind", "unknown") << "\n";
      out << "step=" << ckpt.step << "\n";
      out << "parameters=" << ckpt.parameterCount() << "\n";
      out << "tensors=" << ckpt.tensors.size() << "\n";
    }
  } catch (const Error& e) {
    err << "error (" << errorKindName(e.kind()) << "): " << e.what() << "\n";
    switch (e.kind()) {
      case ErrorKind::Usage:
      case ErrorKind::Domain:
        return kExitUsage;
      case ErrorKind::Numeric:
        return kExitNumeric;
      default:
        return kExitData;
    }
  } catch (const json::exception& e) {
    err << "error (data): " << e.what() << "\n";
    return kExitData;
  } catch (const fs::filesystem_error& e) {
    err << "error (io): " << e.what() << "\n";
    return kExitData;
  }
  return kExitOk;
}

} // namespace avw2
