//! The five networks plus tokens, and their checkpoint container.
//!
//! ```text
//! magic "TRIPCKPT" | version u32 | payload_len u64 | stage u8 | token u8
//! | embed_dim u32 | joints u32 | feat_dim u32 | tau_pair f64 | tau_triplet f64
//! | 5 × (n u32 | widths n × u32 | params f64…)   enc_img, enc_2d, enc_3d, dec_2d, dec_3d
//! | token 3·D f64 (if present) | crc32 u32
//! ```
//! `payload_len` counts every byte before the checksum.

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::embedding::Modality;
use crate::error::{Error, Result};
use crate::nn::{embed, predict_pose, DenseMlp, PoseKind, RepresentationToken};
use crate::synth::input_dim;
use crate::trainer::config::{ModelConfig, Stage};
use crate::util::{write_atomic, ByteReader, ByteWriter};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TRIPCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const TOKEN_INIT_SCALE: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct Models {
    /// Encoders indexed by [`Modality::index`].
    pub encoders: [DenseMlp; 3],
    pub dec_2d: DenseMlp,
    pub dec_3d: DenseMlp,
    pub tokens: Option<RepresentationToken>,
    /// Last stage that ran to completion.
    pub completed: Option<Stage>,
    /// Temperatures at the end of the last completed stage.
    pub tau_pair: f64,
    pub tau_triplet: f64,
    joints: usize,
    feat_dim: usize,
}

fn widths(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut w = vec![input];
    w.extend_from_slice(hidden);
    w.push(output);
    w
}

impl Models {
    /// Fresh networks; each is drawn from its own substream of `seed`.
    pub fn init(cfg: &ModelConfig, joints: usize, feat_dim: usize, seed: u64) -> Result<Models> {
        let rng = |stream: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(stream);
            r
        };
        let d = cfg.embed_dim;
        let enc = |m: Modality| {
            DenseMlp::new(
                &widths(input_dim(m, joints, feat_dim), &cfg.encoder_hidden, d),
                &mut rng(m.index() as u64),
            )
        };
        let encoders = [enc(Modality::Image)?, enc(Modality::Pose2D)?, enc(Modality::Pose3D)?];
        let dec_2d = DenseMlp::new(&widths(d, &cfg.decoder_hidden, 2 * joints), &mut rng(3))?;
        let dec_3d = DenseMlp::new(&widths(d, &cfg.decoder_hidden, 3 * joints), &mut rng(4))?;
        let tokens = cfg
            .token
            .then(|| RepresentationToken::random(d, TOKEN_INIT_SCALE, &mut rng(5)));
        Ok(Models {
            encoders,
            dec_2d,
            dec_3d,
            tokens,
            completed: None,
            tau_pair: f64::NAN,
            tau_triplet: f64::NAN,
            joints,
            feat_dim,
        })
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn feat_dim(&self) -> usize {
        self.feat_dim
    }

    pub fn embed_dim(&self) -> usize {
        self.encoders[0].output_dim()
    }

    pub fn encoder(&self, m: Modality) -> &DenseMlp {
        &self.encoders[m.index()]
    }

    pub fn decoder(&self, kind: PoseKind) -> &DenseMlp {
        match kind {
            PoseKind::TwoD => &self.dec_2d,
            PoseKind::ThreeD => &self.dec_3d,
        }
    }

    /// Unit-norm embeddings of raw encoder inputs.
    pub fn embed(&self, m: Modality, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        embed(self.encoder(m), inputs)
    }

    /// Decodes embeddings that came from `source` into flattened poses.
    pub fn decode(&self, emb: ArrayView2<'_, f64>, source: Modality, kind: PoseKind) -> Result<Array2<f64>> {
        predict_pose(self.decoder(kind), emb, self.tokens.as_ref(), source, kind)
    }

    pub fn require_stage(&self, stage: Stage) -> Result<()> {
        match self.completed {
            Some(s) if s >= stage => Ok(()),
            other => Err(Error::InvalidState(format!(
                "models have not completed {stage} (last completed: {})",
                other.map_or("none", Stage::name)
            ))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut body = ByteWriter::default();
        body.u8(self.completed.map_or(0, Stage::code));
        body.u8(self.tokens.is_some() as u8);
        body.u32(self.embed_dim() as u32);
        body.u32(self.joints as u32);
        body.u32(self.feat_dim as u32);
        body.f64(self.tau_pair);
        body.f64(self.tau_triplet);
        for net in self.networks() {
            body.u32(net.widths().len() as u32);
            for w in net.widths() {
                body.u32(*w as u32);
            }
            body.f64s(net.params());
        }
        if let Some(t) = &self.tokens {
            body.f64s(t.as_slice());
        }
        let body = body.into_inner();
        let mut w = ByteWriter::default();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        let payload_len = CHECKPOINT_MAGIC.len() + 4 + 8 + body.len();
        w.u64(payload_len as u64);
        w.bytes(&body);
        w.finish_with_crc()
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Models> {
        let mut r = ByteReader::open(buf, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, "checkpoint")?;
        let payload_len = usize::try_from(r.u64()?)
            .map_err(|_| Error::Truncated("checkpoint length".into()))?;
        r.verify_crc(payload_len)?;
        let stage_code = r.u8()?;
        let completed = match stage_code {
            0 => None,
            c => Some(
                Stage::from_code(c)
                    .ok_or_else(|| Error::invalid(format!("unknown stage code {c}")))?,
            ),
        };
        let has_token = match r.u8()? {
            0 => false,
            1 => true,
            b => return Err(Error::invalid(format!("bad token flag {b}"))),
        };
        let d = r.u32()? as usize;
        let joints = r.u32()? as usize;
        let feat_dim = r.u32()? as usize;
        let tau_pair = r.f64()?;
        let tau_triplet = r.f64()?;
        let mut nets = Vec::with_capacity(5);
        for _ in 0..5 {
            let n = r.u32()? as usize;
            let widths = (0..n).map(|_| Ok(r.u32()? as usize)).collect::<Result<Vec<_>>>()?;
            let count = crate::nn::param_count(&widths);
            let params = r.f64s(count)?;
            nets.push(DenseMlp::from_params(&widths, params)?);
        }
        let tokens = if has_token {
            Some(RepresentationToken::from_values(Array2::from_shape_vec(
                (3, d),
                r.f64s(3 * d)?,
            )
            .map_err(|e| Error::invalid(e.to_string()))?)?)
        } else {
            None
        };
        if r.position() != payload_len {
            return Err(Error::invalid("checkpoint payload length disagrees with its contents"));
        }
        let mut it = nets.into_iter();
        let mut next = || it.next().unwrap();
        let models = Models {
            encoders: [next(), next(), next()],
            dec_2d: next(),
            dec_3d: next(),
            tokens,
            completed,
            tau_pair,
            tau_triplet,
            joints,
            feat_dim,
        };
        models.check_shapes()?;
        Ok(models)
    }

    fn networks(&self) -> [&DenseMlp; 5] {
        [
            &self.encoders[0],
            &self.encoders[1],
            &self.encoders[2],
            &self.dec_2d,
            &self.dec_3d,
        ]
    }

    fn check_shapes(&self) -> Result<()> {
        let d = self.embed_dim();
        for m in Modality::ALL {
            let e = self.encoder(m);
            if e.input_dim() != input_dim(m, self.joints, self.feat_dim) || e.output_dim() != d {
                return Err(Error::invalid(format!("{m} encoder has the wrong shape")));
            }
        }
        for kind in [PoseKind::TwoD, PoseKind::ThreeD] {
            let dec = self.decoder(kind);
            if dec.input_dim() != d || dec.output_dim() != kind.coords() * self.joints {
                return Err(Error::invalid("decoder has the wrong shape"));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Models> {
        let bytes = std::fs::read(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::InvalidState(format!("checkpoint {} does not exist", path.display()))
            } else {
                Error::Io(e)
            }
        })?;
        Models::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn models() -> Models {
        let cfg = ModelConfig {
            embed_dim: 4,
            encoder_hidden: vec![5],
            decoder_hidden: vec![3],
            token: true,
        };
        Models::init(&cfg, 4, 6, 1).unwrap()
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut m = models();
        m.completed = Some(Stage::Step2);
        m.tau_pair = 0.2;
        m.tau_triplet = 0.3;
        let bytes = m.to_bytes();
        let back = Models::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn checkpoint_failure_modes() {
        let bytes = models().to_bytes();
        let mut bad = bytes.clone();
        bad[40] ^= 1;
        assert!(matches!(Models::from_bytes(&bad), Err(Error::Checksum { .. })));
        assert!(matches!(
            Models::from_bytes(&bytes[..bytes.len() - 9]),
            Err(Error::Truncated(_))
        ));
        assert!(matches!(
            Models::load(Path::new("/nonexistent/x.ckpt")),
            Err(Error::InvalidState(_))
        ));
    }

    #[test]
    fn stage_gate() {
        let mut m = models();
        assert!(m.require_stage(Stage::Step1).is_err());
        m.completed = Some(Stage::Step2);
        assert!(m.require_stage(Stage::Step1).is_ok());
        assert!(m.require_stage(Stage::Finetune).is_err());
    }
}
