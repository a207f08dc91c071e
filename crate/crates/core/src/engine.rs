//! Windowed streaming inference.
//!
//! A clip of `T` frames is cut into `T / W` contiguous windows of `W`
//! frames. Each window is classified on its own; the running mean of the
//! window logits is the consensus prediction. With a feedback variant the
//! session also carries a compressed summary of the previous window into
//! the next one.

use std::time::{Duration, Instant};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{dim_err, Error, Result};
use crate::feedback::{FeedbackState, Variant, FB_DIM};
use crate::net::Network;
use crate::numerics::{Mode, Tensor};

/// Dense skeleton clip `[M, C, T, V]` plus its frame rate.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipTensor {
    pub data: Tensor,
    pub fps: f64,
}

impl ClipTensor {
    pub fn new(data: Tensor, fps: f64) -> Result<Self> {
        if data.rank() != 4 {
            return Err(dim_err!("clip tensor must be [M, C, T, V], got {:?}", data.shape()));
        }
        if !(fps > 0.0) {
            return Err(Error::Domain(format!("fps must be > 0, got {fps}")));
        }
        Ok(Self { data, fps })
    }

    pub fn zeros(persons: usize, channels: usize, frames: usize, joints: usize, fps: f64) -> Result<Self> {
        Self::new(Tensor::zeros(&[persons, channels, frames, joints]), fps)
    }

    pub fn persons(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn joints(&self) -> usize {
        self.data.shape()[3]
    }

    /// Frames `start..start + len` of every person.
    pub fn frame_range(&self, start: usize, len: usize) -> Result<Self> {
        let [m, c, t, v] = [self.persons(), self.channels(), self.frames(), self.joints()];
        if start + len > t {
            return Err(dim_err!("frame range {start}..{} exceeds clip length {t}", start + len));
        }
        let mut out = Vec::with_capacity(m * c * len * v);
        for row in self.data.data().chunks_exact(t * v) {
            out.extend_from_slice(&row[start * v..(start + len) * v]);
        }
        Self::new(Tensor::new(vec![m, c, len, v], out)?, self.fps)
    }
}

/// Latency constraint and feedback mode of a stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowConfig {
    /// Frames per clip.
    pub clip_len: usize,
    /// Frames per window.
    pub window_len: usize,
    pub fps_in: f64,
    pub mode: Variant,
}

impl WindowConfig {
    pub fn new(clip_len: usize, window_len: usize, fps_in: f64, mode: Variant) -> Result<Self> {
        let cfg = Self {
            clip_len,
            window_len,
            fps_in,
            mode,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_len == 0 || self.window_len > self.clip_len {
            return Err(Error::Config(format!(
                "window length must satisfy 1 <= W <= T (W = {}, T = {})",
                self.window_len, self.clip_len
            )));
        }
        if !self.clip_len.is_multiple_of(self.window_len) {
            return Err(Error::Config(format!(
                "clip length {} is not a multiple of window length {}",
                self.clip_len, self.window_len
            )));
        }
        if !(self.fps_in > 0.0) {
            return Err(Error::Config(format!("fps_in must be > 0, got {}", self.fps_in)));
        }
        Ok(())
    }

    pub fn windows_per_clip(&self) -> usize {
        self.clip_len / self.window_len
    }
}

/// Cuts a `T`-frame clip into `T / W` consecutive `W`-frame windows.
pub fn split_windows(clip: &ClipTensor, config: &WindowConfig) -> Result<Vec<ClipTensor>> {
    config.validate()?;
    if clip.frames() != config.clip_len {
        return Err(dim_err!(
            "clip has {} frames, window config expects {}",
            clip.frames(),
            config.clip_len
        ));
    }
    (0..config.windows_per_clip())
        .map(|k| clip.frame_range(k * config.window_len, config.window_len))
        .collect()
}

fn tensor_as_vec<S: Serializer>(t: &Tensor, s: S) -> std::result::Result<S::Ok, S::Error> {
    t.data().serialize(s)
}

fn vec_as_tensor<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Tensor, D::Error> {
    Ok(Tensor::from_vec(Vec::<f64>::deserialize(d)?))
}

/// One classification, emitted after every window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationEvent {
    #[serde(rename = "window")]
    pub window_index: usize,
    #[serde(
        rename = "logits",
        serialize_with = "tensor_as_vec",
        deserialize_with = "vec_as_tensor"
    )]
    pub window_logits: Tensor,
    #[serde(
        rename = "consensus",
        serialize_with = "tensor_as_vec",
        deserialize_with = "vec_as_tensor"
    )]
    pub consensus_logits: Tensor,
    #[serde(rename = "class")]
    pub predicted_class: usize,
    #[serde(rename = "ms")]
    pub wall_time_ms: f64,
}

impl ClassificationEvent {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("event serialization is infallible")
    }
}

/// Per-stream state: feedback, running logit sum and the event log.
#[derive(Debug, Clone)]
pub struct StreamSession {
    pub config: WindowConfig,
    pub fb: FeedbackState,
    pub logits_sum: Option<Tensor>,
    pub windows_seen: usize,
    pub events: Vec<ClassificationEvent>,
}

impl StreamSession {
    pub fn new(config: WindowConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            fb: FeedbackState::empty(),
            logits_sum: None,
            windows_seen: 0,
            events: Vec::new(),
        })
    }

    /// Mean of all window logits so far.
    pub fn consensus_logits(&self) -> Option<Tensor> {
        self.logits_sum
            .as_ref()
            .map(|s| s.scale(1.0 / self.windows_seen as f64))
    }

    /// Forgets feedback and consensus, keeping the config.
    pub fn reset(&mut self) {
        self.fb = FeedbackState::empty();
        self.logits_sum = None;
        self.windows_seen = 0;
        self.events.clear();
    }

    fn check_network(&self, net: &Network) -> Result<()> {
        let mode = self.config.mode;
        if mode.uses_feedback() && net.variant() != mode {
            return Err(Error::State(format!(
                "session mode {mode} needs a network carrying exactly {mode}, found {}",
                net.variant()
            )));
        }
        Ok(())
    }

    /// Classifies one `W`-frame window and advances the stream.
    pub fn step(&mut self, net: &Network, window: &ClipTensor) -> Result<ClassificationEvent> {
        let start = Instant::now();
        if window.frames() != self.config.window_len {
            return Err(dim_err!(
                "window has {} frames, session expects {}",
                window.frames(),
                self.config.window_len
            ));
        }
        self.check_network(net)?;
        let uses_fb = self.config.mode.uses_feedback();
        let fb = (uses_fb && self.fb.is_valid()).then(|| {
            self.fb
                .vector()
                .clone()
                .reshape(&[1, FB_DIM])
                .expect("feedback vector has 32 entries")
        });
        let (out, _) = net.forward(&window.data, window.persons(), fb.as_ref(), Mode::Eval)?;
        let logits = out.logits.clone().reshape(&[net.num_classes()])?;

        if uses_fb {
            let compressor = net
                .compressor
                .as_ref()
                .ok_or_else(|| Error::State("feedback network has no compressor".into()))?;
            let pooled = out.first_person_pooled(window.persons());
            let v = compressor.project(pooled.data());
            self.fb = FeedbackState::new(Tensor::from_vec(v), self.windows_seen + 1)?;
        }

        match &mut self.logits_sum {
            Some(sum) => sum.add_assign(&logits)?,
            None => self.logits_sum = Some(logits.clone()),
        }
        self.windows_seen += 1;
        let consensus = self.consensus_logits().expect("at least one window");
        let event = ClassificationEvent {
            window_index: self.windows_seen - 1,
            predicted_class: consensus.argmax(),
            window_logits: logits,
            consensus_logits: consensus,
            wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        self.events.push(event.clone());
        Ok(event)
    }
}

/// Runs a fresh session over every window of `clip`; returns the final
/// event.
pub fn classify_clip(net: &Network, clip: &ClipTensor, config: &WindowConfig) -> Result<ClassificationEvent> {
    let windows = split_windows(clip, config)?;
    let mut session = StreamSession::new(*config)?;
    let mut last = None;
    for w in &windows {
        last = Some(session.step(net, w)?);
    }
    last.ok_or_else(|| Error::Config("clip produced no windows".into()))
}

/// Classifications per second: `(T / W) * cps_in`.
pub fn compute_aps(clip_len: usize, window_len: usize, cps_in: f64) -> Result<f64> {
    if clip_len == 0 || window_len == 0 || !(cps_in > 0.0) {
        return Err(Error::Domain(format!(
            "compute_aps needs positive inputs, got T = {clip_len}, W = {window_len}, cps = {cps_in}"
        )));
    }
    if window_len > clip_len {
        return Err(Error::Domain(format!(
            "window {window_len} longer than clip {clip_len}"
        )));
    }
    Ok(clip_len as f64 / window_len as f64 * cps_in)
}

/// Seconds of input needed before one classification: `W / fps_in`.
pub fn compute_apd(fps_in: f64, window_len: usize) -> Result<f64> {
    if !(fps_in > 0.0) || !fps_in.is_finite() {
        return Err(Error::Domain(format!("fps must be positive, got {fps_in}")));
    }
    if window_len == 0 {
        return Err(Error::Domain("window length must be >= 1".into()));
    }
    Ok(window_len as f64 / fps_in)
}

/// Result of a timed throughput run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Throughput {
    pub clips: usize,
    pub events: usize,
    pub elapsed: Duration,
}

impl Throughput {
    pub fn clips_per_second(&self) -> f64 {
        self.clips as f64 / self.elapsed.as_secs_f64()
    }

    pub fn events_per_second(&self) -> f64 {
        self.events as f64 / self.elapsed.as_secs_f64()
    }
}

/// Drives synthetic clips with `num_people` person slots through
/// [`classify_clip`] for at least `duration` seconds (and at least one
/// clip) on the calling thread.
pub fn measure_throughput(
    net: &Network,
    config: &WindowConfig,
    num_people: usize,
    duration: f64,
) -> Result<Throughput> {
    if !(duration >= 1.0) {
        return Err(Error::Domain(format!(
            "measurement duration must be >= 1 s, got {duration}"
        )));
    }
    if num_people == 0 {
        return Err(Error::Domain("num_people must be >= 1".into()));
    }
    config.validate()?;
    // deterministic, non-degenerate input
    let (c, t, v) = (net.config().in_channels, config.clip_len, net.num_joints());
    let data = (0..num_people * c * t * v)
        .map(|i| ((i * 7919) % 997) as f64 / 997.0 - 0.5)
        .collect();
    let clip = ClipTensor::new(Tensor::new(vec![num_people, c, t, v], data)?, config.fps_in)?;

    let budget = Duration::from_secs_f64(duration);
    let start = Instant::now();
    let mut clips = 0;
    while clips == 0 || start.elapsed() < budget {
        classify_clip(net, &clip, config)?;
        clips += 1;
    }
    Ok(Throughput {
        clips,
        events: clips * config.windows_per_clip(),
        elapsed: start.elapsed(),
    })
}

/// Measured classifications per second; see [`measure_throughput`].
pub fn measure_aps(net: &Network, config: &WindowConfig, num_people: usize, duration: f64) -> Result<f64> {
    Ok(measure_throughput(net, config, num_people, duration)?.events_per_second())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::SkeletonLayout;
    use crate::net::{network_forward, NetworkConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_net(seed: u64) -> Network {
        let layout = SkeletonLayout::new(5, vec![(0, 1), (1, 2), (1, 3), (3, 4)], 1).unwrap();
        Network::new(NetworkConfig::from_plan(2, 4, layout, &[(6, 1), (6, 2)]).with_seed(seed)).unwrap()
    }

    fn clip(m: usize, t: usize, seed: u64) -> ClipTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ClipTensor::new(Tensor::random(&[m, 2, t, 5], 1.0, &mut rng), 30.0).unwrap()
    }

    #[test]
    fn window_config_rules() {
        assert!(WindowConfig::new(300, 30, 30.0, Variant::Consensus).is_ok());
        assert!(matches!(
            WindowConfig::new(300, 7, 30.0, Variant::Consensus),
            Err(Error::Config(_))
        ));
        assert!(WindowConfig::new(30, 0, 30.0, Variant::Consensus).is_err());
        assert!(WindowConfig::new(30, 60, 30.0, Variant::Consensus).is_err());
        assert!(WindowConfig::new(30, 10, 0.0, Variant::Consensus).is_err());
    }

    #[test]
    fn split_counts_and_ranges() {
        let c = clip(1, 300, 1);
        assert_eq!(
            split_windows(&c, &WindowConfig::new(300, 300, 30.0, Variant::Consensus).unwrap())
                .unwrap()
                .len(),
            1
        );
        assert_eq!(
            split_windows(&c, &WindowConfig::new(300, 30, 30.0, Variant::Consensus).unwrap())
                .unwrap()
                .len(),
            10
        );
        let c = clip(2, 30, 2);
        let ws = split_windows(&c, &WindowConfig::new(30, 10, 30.0, Variant::Consensus).unwrap()).unwrap();
        assert_eq!(ws.len(), 3);
        for (k, w) in ws.iter().enumerate() {
            assert_eq!(w.data.shape(), &[2, 2, 10, 5]);
            for m in 0..2 {
                for t in 0..10 {
                    assert_eq!(w.data.get(&[m, 1, t, 3]), c.data.get(&[m, 1, k * 10 + t, 3]));
                }
            }
        }
    }

    #[test]
    fn consensus_is_mean_of_window_logits() {
        let net = small_net(3);
        let c = clip(1, 8, 4);
        let cfg = WindowConfig::new(8, 4, 30.0, Variant::Consensus).unwrap();
        let ws = split_windows(&c, &cfg).unwrap();
        let mut s = StreamSession::new(cfg).unwrap();
        let e1 = s.step(&net, &ws[0]).unwrap();
        let e2 = s.step(&net, &ws[1]).unwrap();
        let mean = e1.window_logits.add(&e2.window_logits).unwrap().scale(0.5);
        assert!(e2.consensus_logits.max_abs_diff(&mean) < 1e-15);
        assert_eq!(e2.predicted_class, mean.argmax());
        assert_eq!(e2.window_index, 1);
    }

    #[test]
    fn whole_clip_window_equals_plain_forward() {
        let net = small_net(5);
        let c = clip(2, 6, 6);
        let ev = classify_clip(&net, &c, &WindowConfig::new(6, 6, 30.0, Variant::Consensus).unwrap()).unwrap();
        let (logits, _) = network_forward(&net, &c.data).unwrap();
        assert_eq!(ev.window_logits, logits);
        assert_eq!(ev.predicted_class, logits.argmax());
    }

    #[test]
    fn window_length_mismatch_is_dimension_error() {
        let net = small_net(7);
        let mut s = StreamSession::new(WindowConfig::new(8, 4, 30.0, Variant::Consensus).unwrap()).unwrap();
        assert!(matches!(s.step(&net, &clip(1, 2, 8)), Err(Error::Dimension(_))));
    }

    #[test]
    fn feedback_mode_requires_matching_network() {
        let net = small_net(9);
        let mut s = StreamSession::new(WindowConfig::new(4, 2, 30.0, Variant::Semantic).unwrap()).unwrap();
        assert!(matches!(s.step(&net, &clip(1, 2, 10)), Err(Error::State(_))));
    }

    #[test]
    fn consensus_ignores_window_order() {
        let net = small_net(11);
        let c = clip(1, 12, 12);
        let cfg = WindowConfig::new(12, 4, 30.0, Variant::Consensus).unwrap();
        let ws = split_windows(&c, &cfg).unwrap();
        let run = |order: &[usize]| {
            let mut s = StreamSession::new(cfg).unwrap();
            order.iter().map(|&k| s.step(&net, &ws[k]).unwrap()).last().unwrap()
        };
        let a = run(&[0, 1, 2]);
        let b = run(&[2, 0, 1]);
        assert!(a.consensus_logits.max_abs_diff(&b.consensus_logits) < 1e-12);
    }

    #[test]
    fn first_window_of_feedback_session_is_neutral() {
        let mut net = small_net(13);
        net.grow(Variant::SemanticControl).unwrap();
        net.semantic.as_mut().unwrap().res_gate.value.fill(0.5);
        for cf in net.control.iter_mut().flatten() {
            cf.gate.value.fill(0.5);
        }
        let c = clip(1, 4, 14);
        let cfg = WindowConfig::new(4, 2, 30.0, Variant::SemanticControl).unwrap();
        let ws = split_windows(&c, &cfg).unwrap();
        let mut s = StreamSession::new(cfg).unwrap();
        let e = s.step(&net, &ws[0]).unwrap();
        let (plain, _) = network_forward(&net, &ws[0].data).unwrap();
        assert_eq!(e.window_logits, plain);
        assert!(s.fb.is_valid());
        let e2 = s.step(&net, &ws[1]).unwrap();
        let (plain2, _) = network_forward(&net, &ws[1].data).unwrap();
        assert!(e2.window_logits.max_abs_diff(&plain2) > 0.0);
    }

    #[test]
    fn sessions_are_deterministic() {
        let mut net = small_net(15);
        net.grow(Variant::Control).unwrap();
        for cf in net.control.iter_mut().flatten() {
            cf.gate.value.fill(0.9);
        }
        let c = clip(2, 8, 16);
        let cfg = WindowConfig::new(8, 2, 30.0, Variant::Control).unwrap();
        let run = || {
            let mut s = StreamSession::new(cfg).unwrap();
            for w in split_windows(&c, &cfg).unwrap() {
                s.step(&net, &w).unwrap();
            }
            s.events
                .iter()
                .map(|e| (e.window_logits.clone(), e.consensus_logits.clone()))
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn metric_formulas() {
        assert_eq!(compute_aps(300, 300, 2.5).unwrap(), 2.5);
        assert_eq!(compute_aps(300, 30, 1.0).unwrap(), 10.0);
        assert_eq!(compute_aps(90, 30, 2.0).unwrap(), 6.0);
        assert!(compute_aps(30, 300, 1.0).is_err());
        assert!(compute_aps(30, 30, 0.0).is_err());
        assert_eq!(compute_apd(30.0, 300).unwrap(), 10.0);
        assert_eq!(compute_apd(30.0, 30).unwrap(), 1.0);
        assert!(compute_apd(0.0, 30).is_err());
        assert!(compute_apd(-1.0, 30).is_err());
    }

    #[test]
    fn measure_rejects_short_duration() {
        let net = small_net(17);
        let cfg = WindowConfig::new(4, 2, 30.0, Variant::Consensus).unwrap();
        assert!(matches!(measure_aps(&net, &cfg, 1, 0.5), Err(Error::Domain(_))));
    }

    #[test]
    fn event_json_line_fields() {
        let e = ClassificationEvent {
            window_index: 2,
            window_logits: Tensor::from_vec(vec![0.5, -1.0]),
            consensus_logits: Tensor::from_vec(vec![0.25, 0.0]),
            predicted_class: 0,
            wall_time_ms: 1.5,
        };
        let line = e.to_json_line();
        assert_eq!(
            line,
            r#"{"window":2,"logits":[0.5,-1.0],"consensus":[0.25,0.0],"class":0,"ms":1.5}"#
        );
        let back: ClassificationEvent = serde_json::from_str(&line).unwrap();
        assert_eq!(back, e);
    }
}
