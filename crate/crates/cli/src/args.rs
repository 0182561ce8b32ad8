use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use csfp_core::csf::{CsfBand, FrequencyFold, MapParams, ViewingGeometry};
use csfp_core::distort::DistortionKind;
use csfp_core::losses::{DistanceKind, LossConfig, LossKind, MapSource};

#[derive(Debug, Parser)]
#[command(
    name = "csfp",
    version,
    about = "CSF attention maps, attentive perceptual losses and quality-assessment tooling"
)]
pub struct Cli {
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, env = "CSFP_JOBS", default_value_t = 0)]
    pub jobs: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute the attention map of an image.
    Map(MapCmd),
    /// Print a loss report row for a (reference, distorted) pair.
    Loss(LossCmd),
    /// Generate a distorted corpus and its manifest.
    Corpus(CorpusCmd),
    /// Fit a loss against subjective scores and report RMSE/LCC/SROCC.
    Oqa(OqaCmd),
    /// Tabulate fidelity and loss values of the alpha-optimal candidates.
    Tradeoff(TradeoffCmd),
    /// List the layers of a weight bundle.
    Layers(LayersCmd),
}

#[derive(Debug, Clone, Args)]
pub struct MapOpts {
    /// Display dot pitch in millimetres.
    #[arg(long, default_value_t = 0.25)]
    pub dot_pitch: f64,
    /// Viewing distance in millimetres.
    #[arg(long, default_value_t = 550.0)]
    pub distance: f64,
    /// Lower band edge in cycles/degree.
    #[arg(long, default_value_t = 2.0)]
    pub s_low: f64,
    /// Upper band edge in cycles/degree.
    #[arg(long, default_value_t = 23.0)]
    pub s_high: f64,
    /// Use raw bin indices instead of folding bins above Nyquist to negative frequencies.
    #[arg(long)]
    pub no_fold: bool,
}

impl MapOpts {
    pub fn params(&self) -> csfp_core::Result<MapParams> {
        Ok(MapParams {
            band: CsfBand::new(self.s_low, self.s_high)?,
            geometry: ViewingGeometry::new(self.dot_pitch, self.distance)?,
            fold: if self.no_fold { FrequencyFold::Literal } else { FrequencyFold::Folded },
        })
    }
}

#[derive(Debug, Clone, Args)]
pub struct LossOpts {
    /// Weight bundle (CNNW).
    #[arg(long)]
    pub weights: PathBuf,
    /// Layer whose activations are compared.
    #[arg(long)]
    pub layer: String,
    /// Contextual loss bandwidth.
    #[arg(long, default_value_t = LossConfig::DEFAULT_H)]
    pub cx_h: f64,
    /// Contextual loss distance normalization offset.
    #[arg(long, default_value_t = LossConfig::DEFAULT_EPSILON)]
    pub cx_epsilon: f64,
    /// Contextual loss feature distance.
    #[arg(long, value_enum, default_value_t = Distance::Cosine)]
    pub cx_distance: Distance,
    /// Use mu = 1 instead of the CSF map.
    #[arg(long)]
    pub uniform_map: bool,
    #[command(flatten)]
    pub map: MapOpts,
}

impl LossOpts {
    pub fn config(&self, alpha: f64) -> csfp_core::Result<LossConfig> {
        LossConfig::new(alpha, self.cx_h, self.cx_epsilon, self.cx_distance.into())
    }

    pub fn map_source(&self) -> csfp_core::Result<MapSource> {
        Ok(if self.uniform_map { MapSource::Uniform } else { MapSource::Csf(self.map.params()?) })
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Distance {
    Cosine,
    L2,
}

impl From<Distance> for DistanceKind {
    fn from(d: Distance) -> Self {
        match d {
            Distance::Cosine => DistanceKind::Cosine,
            Distance::L2 => DistanceKind::L2,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Kind {
    P,
    #[value(name = "p_att")]
    PAtt,
    Cx,
    #[value(name = "cx_att")]
    CxAtt,
}

impl From<Kind> for LossKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::P => LossKind::P,
            Kind::PAtt => LossKind::PAtt,
            Kind::Cx => LossKind::Cx,
            Kind::CxAtt => LossKind::CxAtt,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Distortion {
    GaussBlur,
    Awgn,
    BlurPlusNoise,
    DownUp,
}

impl From<Distortion> for DistortionKind {
    fn from(d: Distortion) -> Self {
        match d {
            Distortion::GaussBlur => DistortionKind::GaussBlur,
            Distortion::Awgn => DistortionKind::Awgn,
            Distortion::BlurPlusNoise => DistortionKind::BlurPlusNoise,
            Distortion::DownUp => DistortionKind::DownUp,
        }
    }
}

#[derive(Debug, Args)]
pub struct MapCmd {
    /// Input PNG.
    pub input: PathBuf,
    /// Directory for `<stem>_map.png`, `<stem>_map.tnsr` and `run.log`.
    #[arg(short, long, default_value = ".")]
    pub out_dir: PathBuf,
    /// Write a uniform map instead of failing on images without in-band content.
    #[arg(long)]
    pub fallback_uniform: bool,
    #[command(flatten)]
    pub map: MapOpts,
}

#[derive(Debug, Args)]
pub struct LossCmd {
    /// Ground-truth PNG.
    pub reference: PathBuf,
    /// Distorted or restored PNG.
    pub distorted: PathBuf,
    /// Loss entering the combined objective.
    #[arg(long, value_enum, default_value_t = Kind::PAtt)]
    pub kind: Kind,
    /// Weight of the pixel l2 term in the combined loss.
    #[arg(long, default_value_t = LossConfig::DEFAULT_ALPHA)]
    pub alpha: f64,
    /// Identifier written in the first column.
    #[arg(long)]
    pub image_id: Option<String>,
    /// Print the CSV header before the row.
    #[arg(long)]
    pub header: bool,
    #[command(flatten)]
    pub loss: LossOpts,
}

#[derive(Debug, Args)]
pub struct CorpusCmd {
    /// Directory of source PNGs.
    #[arg(long)]
    pub src: PathBuf,
    /// Output directory for distorted images and manifest.csv.
    #[arg(long)]
    pub out: PathBuf,
    /// Distortion families (comma-separated).
    #[arg(long, value_enum, value_delimiter = ',', default_value = "gauss-blur")]
    pub kind: Vec<Distortion>,
    /// Severities applied for every kind (comma-separated).
    #[arg(long, value_delimiter = ',', default_value = "0.5,1,2,4")]
    pub severities: Vec<f64>,
    /// Base noise seed; the k-th source image uses seed + k.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct OqaCmd {
    /// Corpus manifest.
    #[arg(long)]
    pub manifest: PathBuf,
    /// `image_id,dmos` CSV; severity is the subjective proxy when omitted.
    #[arg(long)]
    pub subjective: Option<PathBuf>,
    /// Objective metric.
    #[arg(long, value_enum, default_value_t = Kind::PAtt)]
    pub metric: Kind,
    /// Output directory for oqa_scores.csv and oqa_summary.csv.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub loss: LossOpts,
}

#[derive(Debug, Args)]
pub struct TradeoffCmd {
    /// Corpus manifest; the rows of each reference are its candidates.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Alpha values to sweep (comma-separated).
    #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
    pub alphas: Vec<f64>,
    /// Loss combined with l2 when selecting candidates.
    #[arg(long, value_enum, default_value_t = Kind::PAtt)]
    pub kind: Kind,
    /// Output CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional SVG chart of SSIM and the selected loss against alpha.
    #[arg(long)]
    pub svg: Option<PathBuf>,
    #[command(flatten)]
    pub loss: LossOpts,
}

#[derive(Debug, Args)]
pub struct LayersCmd {
    /// Weight bundle (CNNW).
    #[arg(long)]
    pub weights: PathBuf,
}
