use super::metrics::l2_normalize;
use crate::datagen::{bicubic_resize, Image};
use crate::error::{FanError, Result};
use crate::exec::Exec;
use crate::nets::{Model, Net, Networks, ParamStore, Tensor};

/// Bicubic-resizes to the network input side when needed.
pub fn to_input(img: &Image, side: usize) -> Result<Tensor> {
    if !img.is_square() {
        return Err(FanError::validation(format!(
            "input must be square, got {}x{}",
            img.height(),
            img.width()
        )));
    }
    if img.side() == side {
        Ok(Tensor::from_image(img))
    } else {
        Ok(Tensor::from_image(&bicubic_resize(img, side)?))
    }
}

fn require(nets: &Networks, store: &ParamStore, models: &[Model]) -> Result<()> {
    for &m in models {
        if !nets.has_model(store, m) {
            return Err(FanError::config(format!("checkpoint has no trained {m}")));
        }
    }
    Ok(())
}

/// Unit-length output of `net` on `img`.
pub fn extract_feature(net: &Net, store: &ParamStore, img: &Image) -> Result<Vec<f64>> {
    net.check(store)
        .map_err(|_| FanError::config(format!("checkpoint has no trained {}", net.prefix())))?;
    let side = net.input_shape()[1];
    let f = net.infer(store, &to_input(img, side)?)?;
    l2_normalize(f.data())
}

pub fn extract_features(net: &Net, store: &ParamStore, imgs: &[&Image], exec: Exec) -> Result<Vec<Vec<f64>>> {
    exec.try_map(imgs, |img| extract_feature(net, store, img))
}

/// `Dec(Enc_L(x), 0)` on the raw (unnormalized) identity feature.
pub fn normalize_face(nets: &Networks, store: &ParamStore, img: &Image) -> Result<Image> {
    require(nets, store, &[Model::EncL, Model::Dec])?;
    let x = to_input(img, nets.cfg.image_side)?;
    let f = nets.enc_l.infer(store, &x)?;
    let out = nets.dec.infer(store, &nets.dec_input(&f, &nets.zero_z())?)?;
    out.to_image()
}

/// `(Dec(f_1, z_2), Dec(f_2, z_1))` from Enc_H and Enc_Z.
pub fn feature_transfer(nets: &Networks, store: &ParamStore, img_1: &Image, img_2: &Image) -> Result<(Image, Image)> {
    require(nets, store, &[Model::EncH, Model::EncZ, Model::Dec])?;
    let side = nets.cfg.image_side;
    let (x1, x2) = (to_input(img_1, side)?, to_input(img_2, side)?);
    let (f1, z1) = (nets.enc_h.infer(store, &x1)?, nets.enc_z.infer(store, &x1)?);
    let (f2, z2) = (nets.enc_h.infer(store, &x2)?, nets.enc_z.infer(store, &x2)?);
    let a = nets.dec.infer(store, &nets.dec_input(&f1, &z2)?)?;
    let b = nets.dec.infer(store, &nets.dec_input(&f2, &z1)?)?;
    Ok((a.to_image()?, b.to_image()?))
}

/// `Dec(Enc_H(x), Enc_Z(x))`.
pub fn reconstruct(nets: &Networks, store: &ParamStore, img: &Image) -> Result<Image> {
    require(nets, store, &[Model::EncH, Model::EncZ, Model::Dec])?;
    let x = to_input(img, nets.cfg.image_side)?;
    let f = nets.enc_h.infer(store, &x)?;
    let z = nets.enc_z.infer(store, &x)?;
    nets.dec.infer(store, &nets.dec_input(&f, &z)?)?.to_image()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::NetConfig;

    fn setup() -> (Networks, ParamStore, Image, Image) {
        let cfg = NetConfig::reduced();
        let nets = Networks::new(&cfg).unwrap();
        let mut store = ParamStore::default();
        for m in Model::ALL {
            nets.init_model(&mut store, m, 4).unwrap();
        }
        let a = Image::new(8, 8, (0..64).map(|i| ((i as f64) * 0.3).sin()).collect()).unwrap();
        let b = Image::new(8, 8, (0..64).map(|i| ((i as f64) * 0.7).cos()).collect()).unwrap();
        (nets, store, a, b)
    }

    #[test]
    fn features_are_unit_and_deterministic() {
        let (nets, store, a, _) = setup();
        let f = extract_feature(&nets.enc_h, &store, &a).unwrap();
        let g = extract_feature(&nets.enc_h, &store, &a).unwrap();
        assert_eq!(f, g);
        let n: f64 = f.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
        assert!(super::super::metrics::cosine_distance(&f, &g).unwrap().abs() < 1e-12);
    }

    #[test]
    fn small_inputs_are_resized() {
        let (nets, store, a, _) = setup();
        let small = bicubic_resize(&a, 4).unwrap();
        let out = normalize_face(&nets, &store, &small).unwrap();
        assert_eq!(out.side(), 8);
        assert!(out.pixels().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(out, normalize_face(&nets, &store, &small).unwrap());
    }

    #[test]
    fn self_transfer_is_reconstruction() {
        let (nets, store, a, b) = setup();
        let (x, y) = feature_transfer(&nets, &store, &a, &a).unwrap();
        let r = reconstruct(&nets, &store, &a).unwrap();
        assert_eq!(x, r);
        assert_eq!(y, r);
        let (x, y) = feature_transfer(&nets, &store, &a, &b).unwrap();
        assert_eq!((x.side(), y.side()), (8, 8));
    }

    #[test]
    fn missing_models_are_config_errors() {
        let (nets, mut store, a, _) = setup();
        store.remove_model("enc_l");
        assert!(matches!(normalize_face(&nets, &store, &a), Err(FanError::Config(_))));
        assert!(matches!(extract_feature(&nets.enc_l, &store, &a), Err(FanError::Config(_))));
    }
}
