// Precomputed analog lowpass prototypes at unit cutoff.
// Bessel: magnitude-normalized (-3 dB at w = 1), poles and gain.
// Elliptic: 0.5 dB passband ripple, 50 dB stopband; zeros, poles, gain.

const BESSEL_1: (&[Complex<f64>], f64) = (&[
    Complex::new(-0.9999999999999993, 0.0),
], 0.9999999999999996);
const BESSEL_2: (&[Complex<f64>], f64) = (&[
    Complex::new(-1.1016013305921608, 0.636009824757034),
    Complex::new(-1.1016013305921608, -0.636009824757034),
], 1.6180339887498931);
const BESSEL_3: (&[Complex<f64>], f64) = (&[
    Complex::new(-1.0474091610089349, 0.9992644362806369),
    Complex::new(-1.3226757999104441, 0.0),
    Complex::new(-1.0474091610089349, -0.9992644362806369),
], 2.7717932746063267);
const BESSEL_4: (&[Complex<f64>], f64) = (&[
    Complex::new(-0.995208764350272, 1.257105739454664),
    Complex::new(-1.3700678305514422, 0.41024971749375155),
    Complex::new(-1.3700678305514422, -0.41024971749375155),
    Complex::new(-0.995208764350272, -1.257105739454664),
], 5.258199010244144);
const BESSEL_5: (&[Complex<f64>], f64) = (&[
    Complex::new(-0.9576765485626815, 1.4711243207303943),
    Complex::new(-1.3808773258604392, 0.717909587626768),
    Complex::new(-1.5023162714474785, 0.0),
    Complex::new(-1.3808773258604392, -0.717909587626768),
    Complex::new(-0.9576765485626815, -1.4711243207303943),
], 11.212836685370513);
const BESSEL_6: (&[Complex<f64>], f64) = (&[
    Complex::new(-0.9306565229468591, 1.6618632689425918),
    Complex::new(-1.3818580975965642, 0.9714718907115716),
    Complex::new(-1.5714904036160318, 0.32089637422262396),
    Complex::new(-1.5714904036160318, -0.32089637422262396),
    Complex::new(-1.3818580975965642, -0.9714718907115716),
    Complex::new(-0.9306565229468591, -1.6618632689425918),
], 26.62976888914574);
const BESSEL_7: (&[Complex<f64>], f64) = (&[
    Complex::new(-0.9098677806234705, 1.8364513530363944),
    Complex::new(-1.378903216795475, 1.1915667778006531),
    Complex::new(-1.6120387662261257, 0.589244506931472),
    Complex::new(-1.6843681792731817, 0.0),
    Complex::new(-1.6120387662261257, -0.589244506931472),
    Complex::new(-1.378903216795475, -1.1915667778006531),
    Complex::new(-0.9098677806234705, -1.8364513530363944),
], 69.22126457866987);
const BESSEL_8: (&[Complex<f64>], f64) = (&[
    Complex::new(-0.8928697188471375, 1.9983258436413065),
    Complex::new(-1.3738412176373769, 1.388356575877563),
    Complex::new(-1.6369394181268888, 0.8227956251396998),
    Complex::new(-1.757408400401653, 0.2728675751022327),
    Complex::new(-1.757408400401653, -0.2728675751022327),
    Complex::new(-1.6369394181268888, -0.8227956251396998),
    Complex::new(-1.3738412176373769, -1.388356575877563),
    Complex::new(-0.8928697188471375, -1.9983258436413065),
], 194.02619330333548);
const BESSEL_9: (&[Complex<f64>], f64) = (&[
    Complex::new(-0.8783992761609548, 2.1498005243133265),
    Complex::new(-1.367588309792908, 1.567733712237272),
    Complex::new(-1.6523964845788381, 1.0313895669844126),
    Complex::new(-1.8071705349621046, 0.5123837305749049),
    Complex::new(-1.856600501228007, 0.0),
    Complex::new(-1.8071705349621046, -0.5123837305749049),
    Complex::new(-1.6523964845788381, -1.0313895669844126),
    Complex::new(-1.367588309792908, -1.567733712237272),
    Complex::new(-0.8783992761609548, -2.1498005243133265),
], 580.1750529768236);
const BESSEL_10: (&[Complex<f64>], f64) = (&[
    Complex::new(-0.8657569017083749, 2.2926048309824743),
    Complex::new(-1.3606922783845439, 1.7335057426614757),
    Complex::new(-1.6618102413621516, 1.2211002185791606),
    Complex::new(-1.842196244524833, 0.7272575977574774),
    Complex::new(-1.9276196913722756, 0.24162347097153306),
    Complex::new(-1.9276196913722756, -0.24162347097153306),
    Complex::new(-1.842196244524833, -0.7272575977574774),
    Complex::new(-1.6618102413621516, -1.2211002185791606),
    Complex::new(-1.3606922783845439, -1.7335057426614757),
    Complex::new(-0.8657569017083749, -2.2926048309824743),
], 1836.2467707170426);
const ELLIP_1: (&[Complex<f64>], &[Complex<f64>], f64) = (&[
], &[
    Complex::new(-2.8627751612431886, 0.0),
], 2.8627751612431886);
const ELLIP_2: (&[Complex<f64>], &[Complex<f64>], f64) = (&[
    Complex::new(0.0, 21.287137752550727),
    Complex::new(0.0, -21.287137752550727),
], &[
    Complex::new(-0.7116147636592424, -1.0057207869243996),
    Complex::new(-0.7116147636592424, 1.0057207869243996),
], 0.0031622776601683803);
const ELLIP_3: (&[Complex<f64>], &[Complex<f64>], f64) = (&[
    Complex::new(0.0, 4.489406286039654),
    Complex::new(0.0, -4.489406286039654),
], &[
    Complex::new(-0.6414153496745075, 0.0),
    Complex::new(-0.302498108875829, -1.0260941008403583),
    Complex::new(-0.302498108875829, 1.0260941008403583),
], 0.03641913192284908);
const ELLIP_4: (&[Complex<f64>], &[Complex<f64>], f64) = (&[
    Complex::new(0.0, 5.115080966018746),
    Complex::new(0.0, 2.218984511125233),
    Complex::new(0.0, -5.115080966018746),
    Complex::new(0.0, -2.218984511125233),
], &[
    Complex::new(-0.44091010629288624, -0.4600811370109066),
    Complex::new(-0.15235590945144117, -1.0195468802943568),
    Complex::new(-0.44091010629288624, 0.4600811370109066),
    Complex::new(-0.15235590945144117, 1.0195468802943568),
], 0.003162277660168376);
const ELLIP_5: (&[Complex<f64>], &[Complex<f64>], f64) = (&[
    Complex::new(0.0, 2.3025582755128777),
    Complex::new(0.0, 1.5410150753076293),
    Complex::new(0.0, -2.3025582755128777),
    Complex::new(0.0, -1.5410150753076293),
], &[
    Complex::new(-0.4278836078333788, 0.0),
    Complex::new(-0.28476603661320876, -0.7055272663717959),
    Complex::new(-0.08097308608632943, -1.012527744573531),
    Complex::new(-0.28476603661320876, 0.7055272663717959),
    Complex::new(-0.08097308608632943, 1.012527744573531),
], 0.020297706779619968);
const ELLIP_6: (&[Complex<f64>], &[Complex<f64>], f64) = (&[
    Complex::new(0.0, 3.824078149518911),
    Complex::new(0.0, 1.5659322485897083),
    Complex::new(0.0, 1.2663655628723645),
    Complex::new(0.0, -3.824078149518911),
    Complex::new(0.0, -1.5659322485897083),
    Complex::new(0.0, -1.2663655628723645),
], &[
    Complex::new(-0.3552875926081508, -0.36198225972377085),
    Complex::new(-0.17361940897664555, -0.840324493356574),
    Complex::new(-0.043817497505810134, -1.007483222697844),
    Complex::new(-0.3552875926081508, 0.36198225972377085),
    Complex::new(-0.17361940897664555, 0.840324493356574),
    Complex::new(-0.043817497505810134, 1.007483222697844),
], 0.0031622776601683833);
const ELLIP_7: (&[Complex<f64>], &[Complex<f64>], f64) = (&[
    Complex::new(0.0, 1.9727243790977498),
    Complex::new(0.0, 1.2767262114253217),
    Complex::new(0.0, 1.1379286373916568),
    Complex::new(0.0, -1.9727243790977498),
    Complex::new(0.0, -1.2767262114253217),
    Complex::new(0.0, -1.1379286373916568),
], &[
    Complex::new(-0.37510657622930954, 0.0),
    Complex::new(-0.2562941397883379, -0.6198498475432006),
    Complex::new(-0.10136849916818197, -0.9135286742316021),
    Complex::new(-0.02386945851055592, -1.004300261102227),
    Complex::new(-0.2562941397883379, 0.6198498475432006),
    Complex::new(-0.10136849916818197, 0.9135286742316021),
    Complex::new(-0.02386945851055592, 1.004300261102227),
], 0.017516377967885584);
const ELLIP_8: (&[Complex<f64>], &[Complex<f64>], f64) = (&[
    Complex::new(0.0, 3.5344475028384794),
    Complex::new(0.0, 1.4399114037723644),
    Complex::new(0.0, 1.1429009719973733),
    Complex::new(0.0, 1.0732998768750395),
    Complex::new(0.0, -3.5344475028384794),
    Complex::new(0.0, -1.4399114037723644),
    Complex::new(0.0, -1.1429009719973733),
    Complex::new(0.0, -1.0732998768750395),
], &[
    Complex::new(-0.33057688756944303, -0.33608919430805045),
    Complex::new(-0.16588356515725433, -0.7833495226567567),
    Complex::new(-0.05757932192352612, -0.9530611380115112),
    Complex::new(-0.013038410438484593, -1.0024183830659432),
    Complex::new(-0.33057688756944303, 0.33608919430805045),
    Complex::new(-0.16588356515725433, 0.7833495226567567),
    Complex::new(-0.05757932192352612, 0.9530611380115112),
    Complex::new(-0.013038410438484593, 1.0024183830659432),
], 0.00316227766016837);
const ELLIP_9: (&[Complex<f64>], &[Complex<f64>], f64) = (&[
    Complex::new(0.0, 1.8900514078541115),
    Complex::new(0.0, 1.2195480914983128),
    Complex::new(0.0, 1.075847705573804),
    Complex::new(0.0, 1.039493267798625),
    Complex::new(0.0, -1.8900514078541115),
    Complex::new(0.0, -1.2195480914983128),
    Complex::new(0.0, -1.075847705573804),
    Complex::new(0.0, -1.039493267798625),
], &[
    Complex::new(-0.36012769196695077, 0.0),
    Complex::new(-0.24663490975821603, -0.5952113869546298),
    Complex::new(-0.10001938173628044, -0.8792738345142509),
    Complex::new(-0.03218260871336996, -0.9744450393613197),
    Complex::new(-0.007130887889374847, -1.0013438622393878),
    Complex::new(-0.24663490975821603, 0.5952113869546298),
    Complex::new(-0.10001938173628044, 0.8792738345142509),
    Complex::new(-0.03218260871336996, 0.9744450393613197),
    Complex::new(-0.007130887889374847, 1.0013438622393878),
], 0.01679319427508932);
const ELLIP_10: (&[Complex<f64>], &[Complex<f64>], f64) = (&[
    Complex::new(0.0, 3.4543257276078227),
    Complex::new(0.0, 1.4066205844902566),
    Complex::new(0.0, 1.114604650584853),
    Complex::new(0.0, 1.0408409640639094),
    Complex::new(0.0, 1.0214365311979277),
    Complex::new(0.0, -3.4543257276078227),
    Complex::new(0.0, -1.4066205844902566),
    Complex::new(0.0, -1.114604650584853),
    Complex::new(0.0, -1.0408409640639094),
    Complex::new(0.0, -1.0214365311979277),
], &[
    Complex::new(-0.32327681775166445, -0.32860449052924917),
    Complex::new(-0.16260268543003822, -0.7661794539879657),
    Complex::new(-0.05781150231761077, -0.9333896111562978),
    Complex::new(-0.017824060152059465, -0.98605528743197),
    Complex::new(-0.0039023262709393415, -1.000741847894547),
    Complex::new(-0.32327681775166445, 0.32860449052924917),
    Complex::new(-0.16260268543003822, 0.7661794539879657),
    Complex::new(-0.05781150231761077, 0.9333896111562978),
    Complex::new(-0.017824060152059465, 0.98605528743197),
    Complex::new(-0.0039023262709393415, 1.000741847894547),
], 0.0031622776601684262);
