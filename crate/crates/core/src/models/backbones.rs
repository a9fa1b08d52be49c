//! Convolutional feature extractors laid out after their Keras
//! counterparts, with every channel width divisible by a scale factor.

use crate::nn::{relu, relu6, BatchNorm, Conv2d, DepthwiseConv2d, Init, MaxPool2d, Padding, Residual, Sequential, Tap};

use super::BackboneKind;

pub struct Backbone {
    pub kind: BackboneKind,
    pub layers: Sequential,
    pub out_channels: usize,
    /// Tap on the final convolutional stage, the default CAM layer.
    pub last_conv: String,
}

fn scaled(c: usize, divisor: usize) -> usize {
    c.div_ceil(divisor).max(1)
}

pub fn build(kind: BackboneKind, prefix: &str, divisor: usize, init: &mut Init) -> Backbone {
    match kind {
        BackboneKind::Vgg16 => vgg(kind, prefix, divisor, init, [2, 2, 3, 3, 3]),
        BackboneKind::Vgg19 => vgg(kind, prefix, divisor, init, [2, 2, 4, 4, 4]),
        BackboneKind::ResNet50V2 => resnet50v2(prefix, divisor, init),
        BackboneKind::MobileNetV2 => mobilenetv2(prefix, divisor, init),
        BackboneKind::Xception => xception(prefix, divisor, init),
    }
}

fn vgg(kind: BackboneKind, p: &str, d: usize, init: &mut Init, convs: [usize; 5]) -> Backbone {
    let mut s = Sequential::new();
    let mut cin = 3;
    let mut last = String::new();
    for (b, (&n, width)) in convs.iter().zip([64, 128, 256, 512, 512]).enumerate() {
        let w = scaled(width, d);
        for i in 1..=n {
            s.add(Conv2d::new(format!("{p}/block{}_conv{i}", b + 1), init, cin, w, 3, 1, Padding::Same, true))
                .add_boxed(relu());
            cin = w;
        }
        last = format!("{p}/block{}_conv{n}", b + 1);
        s.add_boxed(Tap::boxed(last.clone()));
        s.add(MaxPool2d::new(2, 2, Padding::Valid));
    }
    Backbone {
        kind,
        layers: s,
        out_channels: cin,
        last_conv: last,
    }
}

fn conv_bn(s: &mut Sequential, name: &str, init: &mut Init, cin: usize, cout: usize, k: usize, stride: usize) {
    s.add(Conv2d::new(format!("{name}_conv"), init, cin, cout, k, stride, Padding::Same, false))
        .add(BatchNorm::new(format!("{name}_bn"), cout));
}

/// Pre-activation bottleneck block.
fn resnet_block(name: &str, init: &mut Init, cin: usize, filters: usize, stride: usize, conv_shortcut: bool) -> Sequential {
    let mut main = Sequential::new();
    let out = 4 * filters;
    let mut outer = Sequential::new();
    if !conv_shortcut {
        main.add(BatchNorm::new(format!("{name}_preact_bn"), cin)).add_boxed(relu());
    }
    conv_bn(&mut main, &format!("{name}_1"), init, cin, filters, 1, 1);
    main.add_boxed(relu());
    conv_bn(&mut main, &format!("{name}_2"), init, filters, filters, 3, stride);
    main.add_boxed(relu());
    main.add(Conv2d::new(format!("{name}_3_conv"), init, filters, out, 1, 1, Padding::Same, true));
    let shortcut = if conv_shortcut {
        outer.add(BatchNorm::new(format!("{name}_preact_bn"), cin)).add_boxed(relu());
        let mut sc = Sequential::new();
        sc.add(Conv2d::new(format!("{name}_0_conv"), init, cin, out, 1, stride, Padding::Same, true));
        Some(sc)
    } else if stride > 1 {
        let mut sc = Sequential::new();
        sc.add(MaxPool2d::new(1, stride, Padding::Same));
        Some(sc)
    } else {
        None
    };
    outer.add(Residual { main, shortcut });
    outer
}

fn resnet50v2(p: &str, d: usize, init: &mut Init) -> Backbone {
    let mut s = Sequential::new();
    let stem = scaled(64, d);
    s.add(Conv2d::new(format!("{p}/conv1_conv"), init, 3, stem, 7, 2, Padding::Same, true))
        .add(MaxPool2d::new(3, 2, Padding::Same));
    let mut cin = stem;
    for (stack, (filters, blocks, stride)) in [(64, 3, 2), (128, 4, 2), (256, 6, 2), (512, 3, 1)].into_iter().enumerate() {
        let f = scaled(filters, d);
        for b in 1..=blocks {
            let name = format!("{p}/conv{}_block{b}", stack + 2);
            let st = if b == blocks { stride } else { 1 };
            s.add(resnet_block(&name, init, cin, f, st, b == 1));
            cin = 4 * f;
        }
        s.add_boxed(Tap::boxed(format!("{p}/conv{}_block{blocks}_out", stack + 2)));
    }
    s.add(BatchNorm::new(format!("{p}/post_bn"), cin)).add_boxed(relu());
    let last = format!("{p}/post_relu");
    s.add_boxed(Tap::boxed(last.clone()));
    Backbone {
        kind: BackboneKind::ResNet50V2,
        layers: s,
        out_channels: cin,
        last_conv: last,
    }
}

fn inverted_residual(name: &str, init: &mut Init, cin: usize, expansion: usize, cout: usize, stride: usize) -> Sequential {
    let mut m = Sequential::new();
    let hidden = cin * expansion;
    if expansion != 1 {
        m.add(Conv2d::new(format!("{name}_expand"), init, cin, hidden, 1, 1, Padding::Same, false))
            .add(BatchNorm::new(format!("{name}_expand_BN"), hidden))
            .add_boxed(relu6());
    }
    m.add(DepthwiseConv2d::new(format!("{name}_depthwise"), init, hidden, 3, stride, Padding::Same))
        .add(BatchNorm::new(format!("{name}_depthwise_BN"), hidden))
        .add_boxed(relu6())
        .add(Conv2d::new(format!("{name}_project"), init, hidden, cout, 1, 1, Padding::Same, false))
        .add(BatchNorm::new(format!("{name}_project_BN"), cout));
    if cin == cout && stride == 1 {
        let mut s = Sequential::new();
        s.add(Residual { main: m, shortcut: None });
        s
    } else {
        m
    }
}

fn mobilenetv2(p: &str, d: usize, init: &mut Init) -> Backbone {
    let mut s = Sequential::new();
    let stem = scaled(32, d);
    s.add(Conv2d::new(format!("{p}/Conv1"), init, 3, stem, 3, 2, Padding::Same, false))
        .add(BatchNorm::new(format!("{p}/bn_Conv1"), stem))
        .add_boxed(relu6());
    let mut cin = stem;
    let first = scaled(16, d);
    s.add(inverted_residual(&format!("{p}/expanded_conv"), init, cin, 1, first, 1));
    cin = first;
    let mut block = 1;
    for (t, c, n, st) in [(6, 24, 2, 2), (6, 32, 3, 2), (6, 64, 4, 2), (6, 96, 3, 1), (6, 160, 3, 2), (6, 320, 1, 1)] {
        let c = scaled(c, d);
        for i in 0..n {
            s.add(inverted_residual(&format!("{p}/block_{block}"), init, cin, t, c, if i == 0 { st } else { 1 }));
            cin = c;
            if block == 6 || block == 13 {
                s.add_boxed(Tap::boxed(format!("{p}/block_{block}_out")));
            }
            block += 1;
        }
    }
    let top = scaled(1280, d);
    s.add(Conv2d::new(format!("{p}/Conv_1"), init, cin, top, 1, 1, Padding::Same, false))
        .add(BatchNorm::new(format!("{p}/Conv_1_bn"), top))
        .add_boxed(relu6());
    let last = format!("{p}/out_relu");
    s.add_boxed(Tap::boxed(last.clone()));
    Backbone {
        kind: BackboneKind::MobileNetV2,
        layers: s,
        out_channels: top,
        last_conv: last,
    }
}

fn sep_conv(s: &mut Sequential, name: &str, init: &mut Init, cin: usize, cout: usize) {
    s.add(DepthwiseConv2d::new(format!("{name}_dw"), init, cin, 3, 1, Padding::Same))
        .add(Conv2d::new(format!("{name}_pw"), init, cin, cout, 1, 1, Padding::Same, false))
        .add(BatchNorm::new(format!("{name}_bn"), cout));
}

/// Entry/exit-flow block: separable convs, strided pool, projected shortcut.
fn xception_down(p: &str, block: usize, init: &mut Init, cin: usize, c1: usize, c2: usize, lead_relu: bool) -> Residual {
    let mut main = Sequential::new();
    if lead_relu {
        main.add_boxed(relu());
    }
    sep_conv(&mut main, &format!("{p}/block{block}_sepconv1"), init, cin, c1);
    main.add_boxed(relu());
    sep_conv(&mut main, &format!("{p}/block{block}_sepconv2"), init, c1, c2);
    main.add(MaxPool2d::new(3, 2, Padding::Same));
    let mut sc = Sequential::new();
    sc.add(Conv2d::new(format!("{p}/block{block}_shortcut"), init, cin, c2, 1, 2, Padding::Same, false))
        .add(BatchNorm::new(format!("{p}/block{block}_shortcut_bn"), c2));
    Residual {
        main,
        shortcut: Some(sc),
    }
}

fn xception(p: &str, d: usize, init: &mut Init) -> Backbone {
    let mut s = Sequential::new();
    let (c32, c64) = (scaled(32, d), scaled(64, d));
    s.add(Conv2d::new(format!("{p}/block1_conv1"), init, 3, c32, 3, 2, Padding::Valid, false))
        .add(BatchNorm::new(format!("{p}/block1_conv1_bn"), c32))
        .add_boxed(relu())
        .add(Conv2d::new(format!("{p}/block1_conv2"), init, c32, c64, 3, 1, Padding::Valid, false))
        .add(BatchNorm::new(format!("{p}/block1_conv2_bn"), c64))
        .add_boxed(relu());
    let (c128, c256, c728) = (scaled(128, d), scaled(256, d), scaled(728, d));
    s.add(xception_down(p, 2, init, c64, c128, c128, false));
    s.add(xception_down(p, 3, init, c128, c256, c256, true));
    s.add(xception_down(p, 4, init, c256, c728, c728, true));
    s.add_boxed(Tap::boxed(format!("{p}/entry_flow_out")));
    for block in 5..=12 {
        let mut main = Sequential::new();
        for i in 1..=3 {
            main.add_boxed(relu());
            sep_conv(&mut main, &format!("{p}/block{block}_sepconv{i}"), init, c728, c728);
        }
        s.add(Residual { main, shortcut: None });
    }
    s.add_boxed(Tap::boxed(format!("{p}/middle_flow_out")));
    let c1024 = scaled(1024, d);
    s.add(xception_down(p, 13, init, c728, c728, c1024, true));
    let (c1536, c2048) = (scaled(1536, d), scaled(2048, d));
    sep_conv(&mut s, &format!("{p}/block14_sepconv1"), init, c1024, c1536);
    s.add_boxed(relu());
    sep_conv(&mut s, &format!("{p}/block14_sepconv2"), init, c1536, c2048);
    s.add_boxed(relu());
    let last = format!("{p}/block14_sepconv2_act");
    s.add_boxed(Tap::boxed(last.clone()));
    Backbone {
        kind: BackboneKind::Xception,
        layers: s,
        out_channels: c2048,
        last_conv: last,
    }
}
