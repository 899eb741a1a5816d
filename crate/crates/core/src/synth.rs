//! Synthetic segmentation cohorts with inter-group shift and a planted hard subset.
//!
//! Each sample is an axis-aligned elliptical blob on a square grid. A group's blobs
//! are centred around the grid centre plus that group's offset and draw their radii
//! from the group's range. Inside `hard_group` a seeded subset of exactly
//! `round(hard_fraction * n_hard_group)` samples gets a dimmed foreground and extra
//! Gaussian noise.
//!
//! Sample `k` (ids are assigned in group order) owns ChaCha substream `k` of
//! `seed`. Its first draw is the key used to choose the hard subset (the smallest
//! keys win), the following draws place the blob, and the rest is pixel noise.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::{Cohort, Sample, SubgroupId};
use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::rng::{self, BoxMuller};

/// Half-width of the uniform jitter applied to blob centres, in pixels.
const CENTER_JITTER: f64 = 1.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_groups: usize,
    pub samples_per_group: Vec<usize>,
    pub grid_size: usize,
    /// Per-group `(dy, dx)` offset of the blob centre from the grid centre.
    pub blob_center_shift: Vec<[f64; 2]>,
    /// Per-group `(min, max)` blob semi-axis length.
    pub blob_radius_range: Vec<[f64; 2]>,
    pub hard_group: usize,
    pub hard_fraction: f64,
    pub hard_noise_sigma: f64,
    pub hard_contrast: f64,
    pub base_noise_sigma: f64,
    pub foreground_intensity: f64,
    pub background_intensity: f64,
    pub attribute_name: String,
    pub group_labels: Vec<String>,
    pub seed: u64,
}

impl Default for SynthConfig {
    /// The benchmark cohort: four tumour-stage-like groups with sizes
    /// 26/227/425/43 and the hard subset planted in the largest group.
    fn default() -> Self {
        Self {
            num_groups: 4,
            samples_per_group: vec![26, 227, 425, 43],
            grid_size: 16,
            blob_center_shift: vec![[-2.0, -2.0], [0.0, 0.0], [1.0, 1.0], [2.0, -2.0]],
            blob_radius_range: vec![[2.0, 3.5], [2.5, 4.5], [3.0, 5.0], [2.0, 4.0]],
            hard_group: 2,
            hard_fraction: 0.3,
            hard_noise_sigma: 0.15,
            hard_contrast: 0.4,
            base_noise_sigma: 0.05,
            foreground_intensity: 0.9,
            background_intensity: 0.1,
            attribute_name: "tumor_stage".into(),
            group_labels: vec!["T1".into(), "T2".into(), "T3".into(), "T4".into()],
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(format!("synth: {msg}")));
        if self.num_groups < 2 {
            return bad(format!("num_groups must be >= 2, got {}", self.num_groups));
        }
        for (name, len) in [
            ("samples_per_group", self.samples_per_group.len()),
            ("blob_center_shift", self.blob_center_shift.len()),
            ("blob_radius_range", self.blob_radius_range.len()),
            ("group_labels", self.group_labels.len()),
        ] {
            if len != self.num_groups {
                return bad(format!(
                    "{name} has {len} entries for {} groups",
                    self.num_groups
                ));
            }
        }
        if let Some(g) = self.samples_per_group.iter().position(|&n| n == 0) {
            return bad(format!("group {g} has zero samples"));
        }
        if self.hard_group >= self.num_groups {
            return bad(format!(
                "hard_group {} out of range for {} groups",
                self.hard_group, self.num_groups
            ));
        }
        if self.grid_size == 0 {
            return bad("grid_size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.hard_fraction) {
            return bad(format!("hard_fraction {} outside [0, 1]", self.hard_fraction));
        }
        if !(self.hard_contrast > 0.0 && self.hard_contrast <= 1.0) {
            return bad(format!("hard_contrast {} outside (0, 1]", self.hard_contrast));
        }
        for (name, s) in [
            ("hard_noise_sigma", self.hard_noise_sigma),
            ("base_noise_sigma", self.base_noise_sigma),
        ] {
            if !(s >= 0.0 && s.is_finite()) {
                return bad(format!("{name} must be finite and >= 0, got {s}"));
            }
        }
        for (name, v) in [
            ("foreground_intensity", self.foreground_intensity),
            ("background_intensity", self.background_intensity),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} {v} outside [0, 1]"));
            }
        }
        for (g, r) in self.blob_radius_range.iter().enumerate() {
            if !(r[0] > 0.0 && r[0] <= r[1] && r[1].is_finite()) {
                return bad(format!("group {g}: radius range {r:?} invalid"));
            }
        }
        if self.blob_center_shift.iter().flatten().any(|v| !v.is_finite()) {
            return bad("blob_center_shift must be finite".into());
        }
        Ok(())
    }

    pub fn total_samples(&self) -> usize {
        self.samples_per_group.iter().sum()
    }

    /// Number of planted hard samples.
    pub fn hard_count(&self) -> usize {
        (self.hard_fraction * self.samples_per_group[self.hard_group] as f64).round() as usize
    }
}

pub fn generate_cohort(config: &SynthConfig) -> Result<Cohort> {
    generate_cohort_with(config, Execution::default())
}

pub fn generate_cohort_with(config: &SynthConfig, exec: Execution) -> Result<Cohort> {
    config.validate()?;
    let groups: Vec<usize> = config
        .samples_per_group
        .iter()
        .enumerate()
        .flat_map(|(g, &n)| std::iter::repeat_n(g, n))
        .collect();

    // Hard subset: the smallest selection keys among the hard group's samples.
    let keys = par::map_indexed(exec, groups.len(), |id| {
        rng::substream(config.seed, id as u64).gen::<u64>()
    });
    let mut candidates: Vec<(u64, usize)> = groups
        .iter()
        .enumerate()
        .filter(|(_, &g)| g == config.hard_group)
        .map(|(id, _)| (keys[id], id))
        .collect();
    candidates.sort_unstable();
    let mut hard = vec![false; groups.len()];
    for &(_, id) in candidates.iter().take(config.hard_count()) {
        hard[id] = true;
    }

    let samples = par::map_indexed(exec, groups.len(), |id| {
        render_sample(config, id as u64, SubgroupId(groups[id]), hard[id])
    });

    Ok(Cohort {
        attribute_name: config.attribute_name.clone(),
        group_labels: config.group_labels.clone(),
        height: config.grid_size,
        width: config.grid_size,
        samples,
    })
}

fn render_sample(config: &SynthConfig, sample_id: u64, group: SubgroupId, hard: bool) -> Sample {
    let size = config.grid_size;
    let mut rng = rng::substream(config.seed, sample_id);
    let _selection_key: u64 = rng.gen();

    let mid = (size as f64 - 1.0) / 2.0;
    let [dy, dx] = config.blob_center_shift[group.0];
    let [r_min, r_max] = config.blob_radius_range[group.0];
    let cy = mid + dy + rng::uniform_in(&mut rng, -CENTER_JITTER, CENTER_JITTER);
    let cx = mid + dx + rng::uniform_in(&mut rng, -CENTER_JITTER, CENTER_JITTER);
    let ry = rng::uniform_in(&mut rng, r_min, r_max);
    let rx = rng::uniform_in(&mut rng, r_min, r_max);

    let fg = if hard {
        config.foreground_intensity * config.hard_contrast
    } else {
        config.foreground_intensity
    };
    let bg = config.background_intensity;

    let mut gauss = BoxMuller::new();
    let mut image = Vec::with_capacity(size * size);
    let mut mask = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let u = (i as f64 - cy) / ry;
            let v = (j as f64 - cx) / rx;
            let inside = u * u + v * v <= 1.0;
            let mut value = if inside { fg } else { bg };
            value += config.base_noise_sigma * gauss.sample(&mut rng);
            if hard {
                value += config.hard_noise_sigma * gauss.sample(&mut rng);
            }
            image.push(value.clamp(0.0, 1.0));
            mask.push(if inside { 1.0 } else { 0.0 });
        }
    }
    Sample {
        sample_id,
        group,
        hard_flag: hard,
        image,
        mask,
    }
}
