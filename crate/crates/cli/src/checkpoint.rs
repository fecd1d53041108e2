use std::io::{Read, Write};
use std::path::Path;

use liaf_core::optim::AdamState;
use liaf_core::{Network, NetworkSpec, Optimizer, Tensor};
use rand_chacha::ChaCha8Rng;

use crate::error::CliError;

pub const MAGIC: [u8; 4] = *b"LIAF";
pub const VERSION: u16 = 1;

/// Full ChaCha8 state: seed, stream and position inside the stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone)]
pub enum OptState {
    Sgd {
        lr: f64,
        weight_decay: f64,
    },
    Adam {
        lr: f64,
        weight_decay: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        step: u64,
        m: Vec<Tensor>,
        v: Vec<Tensor>,
    },
}

/// Everything needed to restart a run: spec, parameters, batch-norm running
/// statistics, optimizer moments and the training RNG.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub spec_json: String,
    pub epoch: u64,
    pub rng: RngState,
    pub opt: OptState,
    pub params: Vec<(String, Tensor)>,
    pub bn: Vec<(usize, Tensor, Tensor)>,
}

fn pack_bytes(bytes: &[u8]) -> Vec<f64> {
    let mut out = Vec::with_capacity(1 + bytes.len().div_ceil(8));
    out.push(bytes.len() as f64);
    for chunk in bytes.chunks(8) {
        let mut word = [0u8; 8];
        word[..chunk.len()].copy_from_slice(chunk);
        out.push(f64::from_bits(u64::from_le_bytes(word)));
    }
    out
}

fn unpack_bytes(data: &[f64]) -> Result<Vec<u8>, CliError> {
    let bad = || CliError::Input("corrupt packed byte section".into());
    let &len = data.first().ok_or_else(bad)?;
    let len = len as usize;
    if data.len() != 1 + len.div_ceil(8) {
        return Err(bad());
    }
    let mut bytes = Vec::with_capacity(len);
    for word in &data[1..] {
        bytes.extend_from_slice(&word.to_bits().to_le_bytes());
    }
    bytes.truncate(len);
    Ok(bytes)
}

fn write_section(
    w: &mut impl Write,
    name: &str,
    shape: &[usize],
    data: &[f64],
) -> std::io::Result<()> {
    debug_assert_eq!(shape.iter().product::<usize>(), data.len());
    w.write_all(&(name.len() as u16).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&[shape.len() as u8])?;
    for &e in shape {
        w.write_all(&(e as u32).to_le_bytes())?;
    }
    for &x in data {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn write_tensor(w: &mut impl Write, name: &str, t: &Tensor) -> std::io::Result<()> {
    write_section(w, name, t.shape(), t.data())
}

struct SectionReader<R> {
    inner: R,
}

impl<R: Read> SectionReader<R> {
    fn next(&mut self) -> Result<Option<(String, Vec<usize>, Vec<f64>)>, CliError> {
        let mut len2 = [0u8; 2];
        match self.inner.read(&mut len2)? {
            0 => return Ok(None),
            1 => self.inner.read_exact(&mut len2[1..])?,
            _ => {}
        }
        let name_len = u16::from_le_bytes(len2) as usize;
        let mut name = vec![0u8; name_len];
        self.inner.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| CliError::Input("checkpoint section name is not UTF-8".into()))?;
        let mut rank = [0u8; 1];
        self.inner.read_exact(&mut rank)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            let mut e = [0u8; 4];
            self.inner.read_exact(&mut e)?;
            shape.push(u32::from_le_bytes(e) as usize);
        }
        let count: usize = shape.iter().product();
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            let mut x = [0u8; 8];
            self.inner.read_exact(&mut x)?;
            data.push(f64::from_le_bytes(x));
        }
        Ok(Some((name, shape, data)))
    }
}

impl Checkpoint {
    pub fn snapshot(
        net: &Network,
        opt: &Optimizer,
        epoch: u64,
        rng: &ChaCha8Rng,
    ) -> Result<Self, CliError> {
        let names: Vec<String> = net.params.iter().map(|p| p.name.clone()).collect();
        let opt = match opt {
            Optimizer::Sgd { lr, weight_decay } => OptState::Sgd {
                lr: *lr,
                weight_decay: *weight_decay,
            },
            Optimizer::Adam(a) => OptState::Adam {
                lr: a.lr,
                weight_decay: a.weight_decay,
                beta1: a.beta1,
                beta2: a.beta2,
                eps: a.eps,
                step: a.step,
                m: a.m.clone(),
                v: a.v.clone(),
            },
        };
        Ok(Checkpoint {
            spec_json: serde_json::to_string(&net.spec)?,
            epoch,
            rng: RngState::capture(rng),
            opt,
            params: names
                .iter()
                .enumerate()
                .map(|(i, n)| (n.clone(), net.params.get(i).value.clone()))
                .collect(),
            bn: net
                .bn
                .iter()
                .map(|b| (b.layer, b.mean.clone(), b.var.clone()))
                .collect(),
        })
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let json = pack_bytes(self.spec_json.as_bytes());
        write_section(w, "meta/network_json", &[json.len()], &json)?;
        write_section(w, "meta/epoch", &[1], &[self.epoch as f64])?;
        let mut rng = Vec::with_capacity(7);
        for chunk in self.rng.seed.chunks(8) {
            rng.push(f64::from_bits(u64::from_le_bytes(chunk.try_into().unwrap())));
        }
        rng.push(f64::from_bits(self.rng.stream));
        rng.push(f64::from_bits(self.rng.word_pos as u64));
        rng.push(f64::from_bits((self.rng.word_pos >> 64) as u64));
        write_section(w, "meta/rng", &[7], &rng)?;
        match &self.opt {
            OptState::Sgd { lr, weight_decay } => {
                write_section(w, "opt/kind", &[1], &[0.0])?;
                write_section(w, "opt/lr", &[1], &[*lr])?;
                write_section(w, "opt/weight_decay", &[1], &[*weight_decay])?;
            }
            OptState::Adam {
                lr,
                weight_decay,
                beta1,
                beta2,
                eps,
                step,
                m,
                v,
            } => {
                write_section(w, "opt/kind", &[1], &[1.0])?;
                write_section(w, "opt/lr", &[1], &[*lr])?;
                write_section(w, "opt/weight_decay", &[1], &[*weight_decay])?;
                write_section(w, "opt/beta1", &[1], &[*beta1])?;
                write_section(w, "opt/beta2", &[1], &[*beta2])?;
                write_section(w, "opt/eps", &[1], &[*eps])?;
                write_section(w, "opt/step", &[1], &[*step as f64])?;
                for ((name, _), t) in self.params.iter().zip(m) {
                    write_tensor(w, &format!("opt/m/{name}"), t)?;
                }
                for ((name, _), t) in self.params.iter().zip(v) {
                    write_tensor(w, &format!("opt/v/{name}"), t)?;
                }
            }
        }
        for (name, t) in &self.params {
            write_tensor(w, &format!("param/{name}"), t)?;
        }
        for (layer, mean, var) in &self.bn {
            write_tensor(w, &format!("bn/{layer}/mean"), mean)?;
            write_tensor(w, &format!("bn/{layer}/var"), var)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, CliError> {
        let mut head = [0u8; 6];
        r.read_exact(&mut head)
            .map_err(|_| CliError::Input("checkpoint too short for its header".into()))?;
        if head[..4] != MAGIC {
            return Err(CliError::Input("bad checkpoint magic".into()));
        }
        let version = u16::from_le_bytes([head[4], head[5]]);
        if version != VERSION {
            return Err(CliError::Input(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let mut reader = SectionReader { inner: r };
        let mut sections = Vec::new();
        while let Some(s) = reader.next()? {
            sections.push(s);
        }
        let find = |name: &str| -> Result<&(String, Vec<usize>, Vec<f64>), CliError> {
            sections
                .iter()
                .find(|(n, _, _)| n == name)
                .ok_or_else(|| CliError::Input(format!("checkpoint misses section {name}")))
        };
        let scalar = |name: &str| -> Result<f64, CliError> {
            let (_, _, data) = find(name)?;
            if data.len() != 1 {
                return Err(CliError::Input(format!("section {name} is not a scalar")));
            }
            Ok(data[0])
        };

        let spec_json = String::from_utf8(unpack_bytes(&find("meta/network_json")?.2)?)
            .map_err(|_| CliError::Input("stored network spec is not UTF-8".into()))?;
        let epoch = scalar("meta/epoch")? as u64;
        let rng_words = &find("meta/rng")?.2;
        if rng_words.len() != 7 {
            return Err(CliError::Input("meta/rng wants 7 entries".into()));
        }
        let mut seed = [0u8; 32];
        for (i, w) in rng_words[..4].iter().enumerate() {
            seed[i * 8..(i + 1) * 8].copy_from_slice(&w.to_bits().to_le_bytes());
        }
        let rng = RngState {
            seed,
            stream: rng_words[4].to_bits(),
            word_pos: rng_words[5].to_bits() as u128
                | ((rng_words[6].to_bits() as u128) << 64),
        };

        let spec: NetworkSpec = serde_json::from_str(&spec_json)?;
        let skeleton = Network::build(spec, 0)?;
        let tensor_for = |name: &str| -> Result<Tensor, CliError> {
            let (_, shape, data) = find(name)?;
            Tensor::new(shape, data.clone()).map_err(CliError::from)
        };
        let mut params = Vec::with_capacity(skeleton.params.len());
        for p in skeleton.params.iter() {
            params.push((p.name.clone(), tensor_for(&format!("param/{}", p.name))?));
        }
        let mut bn = Vec::with_capacity(skeleton.bn.len());
        for b in &skeleton.bn {
            bn.push((
                b.layer,
                tensor_for(&format!("bn/{}/mean", b.layer))?,
                tensor_for(&format!("bn/{}/var", b.layer))?,
            ));
        }
        let opt = match scalar("opt/kind")? as u8 {
            0 => OptState::Sgd {
                lr: scalar("opt/lr")?,
                weight_decay: scalar("opt/weight_decay")?,
            },
            1 => {
                let mut m = Vec::with_capacity(params.len());
                let mut v = Vec::with_capacity(params.len());
                for (name, _) in &params {
                    m.push(tensor_for(&format!("opt/m/{name}"))?);
                    v.push(tensor_for(&format!("opt/v/{name}"))?);
                }
                OptState::Adam {
                    lr: scalar("opt/lr")?,
                    weight_decay: scalar("opt/weight_decay")?,
                    beta1: scalar("opt/beta1")?,
                    beta2: scalar("opt/beta2")?,
                    eps: scalar("opt/eps")?,
                    step: scalar("opt/step")? as u64,
                    m,
                    v,
                }
            }
            k => return Err(CliError::Input(format!("unknown optimizer kind {k}"))),
        };
        Ok(Checkpoint {
            spec_json,
            epoch,
            rng,
            opt,
            params,
            bn,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let bytes = std::fs::read(path)
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        Self::read_from(&mut bytes.as_slice())
    }

    /// Rebuilds the network, optimizer, epoch counter and RNG this
    /// checkpoint was taken from.
    pub fn restore(&self) -> Result<(Network, Optimizer, u64, ChaCha8Rng), CliError> {
        let spec: NetworkSpec = serde_json::from_str(&self.spec_json)?;
        let mut net = Network::build(spec, 0)?;
        if net.params.len() != self.params.len() {
            return Err(CliError::Input(format!(
                "checkpoint has {} parameters, network wants {}",
                self.params.len(),
                net.params.len()
            )));
        }
        for (i, (name, value)) in self.params.iter().enumerate() {
            let p = net.params.get_mut(i);
            if &p.name != name {
                return Err(CliError::Input(format!(
                    "parameter order mismatch: {} vs {name}",
                    p.name
                )));
            }
            if p.value.shape() != value.shape() {
                return Err(CliError::Input(format!(
                    "parameter {name} has shape {:?}, checkpoint carries {:?}",
                    p.value.shape(),
                    value.shape()
                )));
            }
            p.value = value.clone();
        }
        if net.bn.len() != self.bn.len() {
            return Err(CliError::Input("batch-norm slot count mismatch".into()));
        }
        for (slot, (layer, mean, var)) in net.bn.iter_mut().zip(&self.bn) {
            if slot.layer != *layer {
                return Err(CliError::Input("batch-norm layer mismatch".into()));
            }
            slot.mean = mean.clone();
            slot.var = var.clone();
        }
        let opt = match &self.opt {
            OptState::Sgd { lr, weight_decay } => Optimizer::Sgd {
                lr: *lr,
                weight_decay: *weight_decay,
            },
            OptState::Adam {
                lr,
                weight_decay,
                beta1,
                beta2,
                eps,
                step,
                m,
                v,
            } => Optimizer::Adam(AdamState {
                lr: *lr,
                beta1: *beta1,
                beta2: *beta2,
                eps: *eps,
                weight_decay: *weight_decay,
                step: *step,
                m: m.clone(),
                v: v.clone(),
            }),
        };
        Ok((net, opt, self.epoch, self.rng.restore()))
    }
}
